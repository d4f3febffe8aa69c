"""Shared fixtures/oracles for federation and acceptance tests."""

import itertools

import numpy as np
from scipy.linalg import sqrtm

from fedsi.config import DataConfig, ExperimentConfig
from fedsi.data import LabeledSet, partition_label_skew, synthetic_mixture
from fedsi.federation import (
    batch_rng,
    client_init_model,
    eligible_clients,
    global_init_model,
    sample_clients,
)
from fedsi.model import (
    AdamState,
    ClientModel,
    adam_step,
    minibatch_indices,
    nll_and_grad,
)


def exhaustive_best_subset(variances, size):
    """Brute-force minimizer of the left-out-variance objective.

    Combinations are visited in lexicographic order and only strictly
    better costs replace the incumbent, so ties resolve to the same
    lowest-index subset the stable selection uses.
    """
    best, best_cost = None, np.inf
    for subset in itertools.combinations(range(len(variances)), size):
        cost = sum(v for i, v in enumerate(variances) if i not in subset)
        if cost < best_cost - 1e-15:
            best, best_cost = subset, cost
    return np.array(best, dtype=np.int64), best_cost


def w2_trace_oracle(variances, mask):
    """General closed-form squared transport distance on diagonal covariances."""
    v = np.asarray(variances, dtype=np.float64)
    sigma1 = np.diag(v)
    sigma2 = np.zeros_like(sigma1)
    mask = np.asarray(mask, dtype=np.int64)
    sigma2[mask, mask] = v[mask]
    root2 = np.real(sqrtm(sigma2))
    inner = np.real(sqrtm(root2 @ sigma1 @ root2))
    return float(np.trace(sigma1 + sigma2 - 2.0 * inner))


def complex_step_jacobian(theta, phi, layout, x):
    """Machine-precision Jacobian of the logits via complex-step derivatives."""
    ih, hd, od = layout.input_dim, layout.hidden_dim, layout.output_dim
    h = 1e-200

    def forward_complex(th):
        w1 = th[:ih * hd].reshape(hd, ih)
        b1 = th[ih * hd:]
        z1 = w1 @ x + b1
        hidden = np.where(z1.real > 0, z1, 0.0)
        w2 = phi[:hd * od].reshape(od, hd)
        return w2 @ hidden + phi[hd * od:]

    jac = np.zeros((od, theta.size))
    for k in range(theta.size):
        bumped = theta.astype(complex)
        bumped[k] += 1j * h
        jac[:, k] = forward_complex(bumped).imag / h
    return jac


def twin_pair_corpus(dim, radius, gap, seed, per_class=6000):
    """Ten classes as five twin pairs: hard within a pair, easy across pairs.

    Pair centers sit on orthonormal directions at `radius`; the twins of a
    pair are split by `gap` along an orthogonal axis, so within-pair
    confusion has an irreducible error floor that a global ten-way model
    always pays but a client missing one twin never does.  This mirrors
    the non-uniform class confusability of handwritten-digit data.
    """
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(dim, 10))
    q, _ = np.linalg.qr(raw)
    centers = radius * q.T[:5]
    axes = q.T[5:10]
    means = []
    for k in range(5):
        means.append(centers[k] + 0.5 * gap * axes[k])
        means.append(centers[k] - 0.5 * gap * axes[k])
    xs, ys = [], []
    for label, mean in enumerate(means):
        xs.append(mean + rng.normal(size=(per_class, dim)))
        ys.append(np.full(per_class, label, dtype=np.int64))
    xs = np.concatenate(xs)
    ys = np.concatenate(ys)
    perm = rng.permutation(len(ys))
    n_train = int(0.8 * len(ys))
    return (LabeledSet(xs[perm[:n_train]], ys[perm[:n_train]]),
            LabeledSet(xs[perm[n_train:]], ys[perm[n_train:]]))


def synth_config(**overrides) -> ExperimentConfig:
    """Small synthetic-problem config; overrides patch individual fields."""
    data_fields = dict(kind="synthetic", n_clients=4, labels_per_client=2,
                       n_classes=4, dim=6, per_class=40, separation=4.0)
    data_fields.update(overrides.pop("data", {}))
    data = DataConfig(**data_fields)
    base = dict(algorithm="fedsi", seed=7, rounds=3, clients_per_round=4,
                local_epochs=2, batch_size=8, lr=1e-2, alpha=1e-2,
                subnet_ratio=0.2, fine_tune_epochs=4, ece_bins=10,
                hidden_dim=8, data=data)
    base.update(overrides)
    return ExperimentConfig(**base)


def synth_partition(cfg: ExperimentConfig, data_seed: int = 100):
    train, test = synthetic_mixture(cfg.data.n_classes, cfg.data.dim,
                                    cfg.data.per_class, cfg.data.separation,
                                    seed=data_seed)
    return partition_label_skew(train, test, cfg.data.n_clients,
                                cfg.data.labels_per_client, seed=data_seed + 1)


def layout_for(cfg: ExperimentConfig, dataset):
    from fedsi.model import LayerLayout
    return LayerLayout(input_dim=dataset.clients[0].train.features.shape[1],
                       hidden_dim=cfg.hidden_dim,
                       output_dim=dataset.num_classes)


def representation_fedavg_oracle(cfg, dataset, layout):
    """Plain federated averaging applied to the representation block only.

    Decision blocks stay at their per-client initial values and the local
    objective is the unpenalized likelihood; this is the reference the
    subnetwork algorithm must reproduce bit-for-bit once its Bayesian
    machinery is disabled (empty subnetworks, infinite prior variance).
    Written as an independent loop on the low-level primitives.
    """
    theta = global_init_model(cfg, layout).theta.copy()
    phi0 = {i: client_init_model(cfg, layout, i).phi
            for i in range(dataset.n_clients)}
    eligible = eligible_clients(cfg)
    trajectory = [theta.copy()]
    for t in range(cfg.rounds):
        sampled = sample_clients(cfg, t, eligible)
        trained = {}
        for cid in sampled:
            split = dataset.clients[cid]
            xs, ys = split.train.features, split.train.labels
            rng = batch_rng(cfg, t, cid)
            th = theta.copy()
            state = AdamState.zeros(th.size)
            for _ in range(cfg.local_epochs):
                for idx in minibatch_indices(rng, xs.shape[0], cfg.batch_size):
                    model = ClientModel(theta=th, phi=phi0[cid], layout=layout)
                    _, grad = nll_and_grad(model, xs[idx], ys[idx], None)
                    th, state = adam_step(state, th, grad, cfg.lr)
            trained[cid] = th
        total = np.zeros_like(theta)
        for cid in sorted(trained):
            total += trained[cid]
        theta = total / len(trained)
        trajectory.append(theta.copy())
    return trajectory
