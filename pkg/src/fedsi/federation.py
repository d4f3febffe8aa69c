"""Federated training rounds, aggregation, finalization, and baselines.

The server state for the subnetwork-inference algorithms is a per-parameter
Gaussian over the representation block; deterministic entries carry
variance zero and are re-stochastized to the configured floor when
broadcast.  Baselines (plain averaging, averaging plus fine-tuning, and
isolated local training) share the same seed derivations, sampling, and
minibatch streams so that cross-algorithm comparisons are exact.

Client updates are pure functions of the broadcast state and the client's
own data; they may run concurrently.  Aggregation is a single ordered
reduction over ascending client ids, which makes every run bit-reproducible
for a fixed config and seed.
"""

from __future__ import annotations

import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .data import FederatedDataset
from .errors import EmptyUpdateSet, NonFiniteLoss
from .laplace import (
    GaussianPriorView,
    SubnetPosterior,
    assemble_ggn,
    assemble_ggn_diag,
    lowrank_subnet_variances,
    map_train,
    marginal_variances,
    predictive_classify_batch,
    select_subnetwork,
    subnet_posterior,
    subnet_size,
)
from .metrics import reliability_bins, summarize
from .model import (
    AdamState,
    ClientModel,
    LayerLayout,
    adam_step,
    forward_batch,
    init_model,
    minibatch_indices,
    nll_and_grad_joint,
    nll_and_grad_phi,
    softmax,
)

# Seed-derivation tags; every random stream in a run is keyed by
# (master seed, tag, ...context) so independent reimplementations can
# reproduce any single stream.
TAG_GLOBAL_INIT = 0
TAG_CLIENT_INIT = 1
TAG_ROUND_SAMPLE = 2
TAG_BATCH = 3
TAG_FINE_TUNE = 4


def derived_rng(master_seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, *tags]))


def global_init_model(cfg: ExperimentConfig, layout: LayerLayout) -> ClientModel:
    """The shared round-0 model; its theta is the initial global mean."""
    return init_model(layout, derived_rng(cfg.seed, TAG_GLOBAL_INIT))


def client_init_model(cfg: ExperimentConfig, layout: LayerLayout,
                      client_id: int) -> ClientModel:
    """Per-client initial model; its phi is the fixed decision block."""
    return init_model(layout, derived_rng(cfg.seed, TAG_CLIENT_INIT, client_id))


def batch_rng(cfg: ExperimentConfig, round_index: int,
              client_id: int) -> np.random.Generator:
    """Minibatch shuffling stream; shared by every algorithm."""
    return derived_rng(cfg.seed, TAG_BATCH, round_index, client_id)


def fine_tune_rng(cfg: ExperimentConfig, client_id: int) -> np.random.Generator:
    return derived_rng(cfg.seed, TAG_FINE_TUNE, client_id)


def sample_clients(cfg: ExperimentConfig, round_index: int,
                   eligible: list[int]) -> list[int]:
    """C clients drawn without replacement, ascending, seeded per round."""
    rng = derived_rng(cfg.seed, TAG_ROUND_SAMPLE, round_index)
    count = min(cfg.clients_per_round, len(eligible))
    picks = rng.choice(np.asarray(eligible, dtype=np.int64), size=count, replace=False)
    return sorted(int(i) for i in picks)


@dataclass(frozen=True)
class GlobalDistribution:
    """Server-side Gaussian over the representation block."""

    mu: np.ndarray
    sigma2: np.ndarray
    round_index: int = 0

    def __post_init__(self):
        if self.mu.shape != self.sigma2.shape or self.mu.ndim != 1:
            raise ValueError("mu and sigma2 must be equal-length vectors")
        if np.any(self.sigma2 < 0.0):
            raise ValueError("sigma2 entries must be nonnegative")


@dataclass(frozen=True)
class ClientUpdate:
    """One client's contribution: new means plus subnetwork marginals."""

    client_id: int
    mu: np.ndarray
    sigma2: np.ndarray
    mask: np.ndarray
    train_loss: float


@dataclass
class RoundRecord:
    round_index: int
    sampled: list[int]
    losses: dict[int, float]
    seconds: dict[int, float]
    failed: list[int] = field(default_factory=list)
    checkpoint: str | None = None


@dataclass
class RoundHistory:
    records: list[RoundRecord] = field(default_factory=list)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("round,client_id,train_loss,seconds\n")
        for rec in self.records:
            for cid in rec.sampled:
                loss = rec.losses.get(cid, float("nan"))
                secs = rec.seconds.get(cid, float("nan"))
                out.write(f"{rec.round_index},{cid},{loss:.17g},{secs:.6f}\n")
        return out.getvalue()


def broadcast_prior(g: GlobalDistribution, alpha: float) -> GaussianPriorView:
    """Re-stochastize: deterministic (zero-variance) entries get variance alpha."""
    if not alpha > 0.0:
        raise ValueError("alpha must be > 0")
    variance = np.where(g.sigma2 > 0.0, g.sigma2, alpha)
    return GaussianPriorView(mean=g.mu, variance=variance)


def client_update(client_id: int, g: GlobalDistribution, phi0: np.ndarray,
                  train_x: np.ndarray, train_y: np.ndarray,
                  cfg: ExperimentConfig, layout: LayerLayout) -> ClientUpdate:
    """One local round: penalized MAP training, then subnetwork marginals.

    The subnetwork is chosen from the broadcast prior variances; its
    posterior precision is the Gauss-Newton matrix at the trained means
    over the client's full split.  Off-subnetwork entries report variance
    exactly zero.
    """
    if train_x.shape[0] < 1:
        raise ValueError(f"client {client_id} has no training data")
    prior = broadcast_prior(g, cfg.alpha)
    model = ClientModel(theta=g.mu.copy(), phi=phi0, layout=layout)
    theta_map, loss = map_train(
        model, train_x, train_y, prior, cfg.local_epochs, cfg.batch_size,
        cfg.lr, batch_rng(cfg, g.round_index, client_id))
    trained = model.with_theta(theta_map)

    size = subnet_size(layout.repr_size, cfg.subnet_ratio)
    mask = select_subnetwork(prior.variance, size)
    sigma2 = np.zeros(layout.repr_size)
    if size > 0:
        if cfg.algorithm == "fedsi_fac":
            diag = assemble_ggn_diag(trained, train_x, mask, prior.variance)
            post = subnet_posterior(theta_map, mask, diag, layout.repr_size)
            sigma2 = marginal_variances(post)
        else:
            rows = train_x.shape[0] * layout.output_dim
            if cfg.exact_marginals or rows >= size:
                ggn = assemble_ggn(trained, train_x, mask, prior.variance)
                post = subnet_posterior(theta_map, mask, ggn, layout.repr_size)
                sigma2 = marginal_variances(post)
            else:
                sigma2[mask] = lowrank_subnet_variances(
                    trained, train_x, mask, prior.variance)
    return ClientUpdate(client_id=client_id, mu=theta_map, sigma2=sigma2,
                        mask=mask, train_loss=loss)


def aggregate(updates: list[ClientUpdate]) -> GlobalDistribution:
    """Elementwise mean of means and variances, reduced in ascending id order.

    Zero-variance (deterministic) entries participate as degenerate
    Gaussians: they simply contribute zeros to the variance average.
    """
    if not updates:
        raise EmptyUpdateSet("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    size = ordered[0].mu.size
    mu = np.zeros(size)
    sigma2 = np.zeros(size)
    for upd in ordered:
        if upd.mu.size != size:
            raise ValueError("client updates disagree on representation size")
        mu += upd.mu
        sigma2 += upd.sigma2
    count = float(len(ordered))
    return GlobalDistribution(mu=mu / count, sigma2=sigma2 / count, round_index=0)


@dataclass
class TrainResult:
    """Everything a run produces besides files: final state plus history."""

    algorithm: str
    layout: LayerLayout
    history: RoundHistory
    global_dist: GlobalDistribution | None = None
    global_theta: np.ndarray | None = None
    global_phi: np.ndarray | None = None
    client_thetas: list[np.ndarray] | None = None
    client_phis: list[np.ndarray] | None = None


def _worker_count(cfg_clients: int) -> int:
    env = os.environ.get("FEDSI_THREADS", "")
    try:
        cap = int(env) if env else (os.cpu_count() or 1)
    except ValueError:
        cap = os.cpu_count() or 1
    return max(1, min(cap, cfg_clients))


def _run_client_tasks(ids: list[int], task) -> tuple[dict, dict, dict, list[int]]:
    """Run per-client callables (serially or in a pool); returns results keyed by id."""
    results: dict[int, object] = {}
    losses: dict[int, float] = {}
    seconds: dict[int, float] = {}
    failed: list[int] = []

    def timed(cid: int):
        start = time.perf_counter()
        try:
            value, loss = task(cid)
            return cid, value, loss, time.perf_counter() - start, None
        except NonFiniteLoss as exc:
            return cid, None, float("nan"), time.perf_counter() - start, exc

    workers = _worker_count(len(ids))
    if workers > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(timed, ids))
    else:
        outcomes = [timed(cid) for cid in ids]
    for cid, value, loss, secs, err in outcomes:
        seconds[cid] = secs
        losses[cid] = loss
        if err is None:
            results[cid] = value
        else:
            failed.append(cid)
    return results, losses, seconds, failed


def eligible_clients(cfg: ExperimentConfig) -> list[int]:
    ids = list(range(cfg.data.n_clients))
    if cfg.novel_client is not None:
        ids = [i for i in ids if i != cfg.novel_client]
    return ids


def run_rounds(cfg: ExperimentConfig, dataset: FederatedDataset,
               layout: LayerLayout, checkpoint_writer=None) -> TrainResult:
    """Drive the configured algorithm for cfg.rounds communication rounds.

    `checkpoint_writer(result, round_index)` is invoked at the configured
    interval and once more after the final round.
    """
    if cfg.algorithm in ("fedsi", "fedsi_fac"):
        result = _run_subnet_inference(cfg, dataset, layout, checkpoint_writer)
    elif cfg.algorithm in ("fedavg", "fedavg_ft"):
        result = _run_fedavg(cfg, dataset, layout, checkpoint_writer)
    elif cfg.algorithm == "local_only":
        result = _run_local_only(cfg, dataset, layout, checkpoint_writer)
    else:
        raise ValueError(f"unknown algorithm {cfg.algorithm!r}")
    return result


def _maybe_checkpoint(cfg, writer, result, round_index, history, force=False):
    if writer is None:
        return
    due = force or (cfg.checkpoint_interval > 0
                    and round_index % cfg.checkpoint_interval == 0)
    if due:
        ref = writer(result, round_index)
        if history.records:
            history.records[-1].checkpoint = ref


def _run_subnet_inference(cfg, dataset, layout, checkpoint_writer) -> TrainResult:
    phi0s = {i: client_init_model(cfg, layout, i).phi for i in range(dataset.n_clients)}
    g = GlobalDistribution(mu=global_init_model(cfg, layout).theta,
                           sigma2=np.zeros(layout.repr_size), round_index=0)
    history = RoundHistory()
    result = TrainResult(algorithm=cfg.algorithm, layout=layout, history=history,
                         global_dist=g)
    eligible = eligible_clients(cfg)
    for t in range(cfg.rounds):
        sampled = sample_clients(cfg, t, eligible)
        g_t = GlobalDistribution(mu=g.mu, sigma2=g.sigma2, round_index=t)

        def task(cid: int):
            split = dataset.clients[cid]
            upd = client_update(cid, g_t, phi0s[cid], split.train.features,
                                split.train.labels, cfg, layout)
            return upd, upd.train_loss

        results, losses, seconds, failed = _run_client_tasks(sampled, task)
        if not results:
            raise NonFiniteLoss(f"every sampled client failed in round {t}")
        agg = aggregate([results[cid] for cid in sorted(results)])
        g = GlobalDistribution(mu=agg.mu, sigma2=agg.sigma2, round_index=t + 1)
        history.records.append(RoundRecord(round_index=t, sampled=sampled,
                                           losses=losses, seconds=seconds,
                                           failed=failed))
        result.global_dist = g
        _maybe_checkpoint(cfg, checkpoint_writer, result, t + 1, history)
    result.global_dist = g
    _maybe_checkpoint(cfg, checkpoint_writer, result, cfg.rounds, history, force=True)
    return result


def train_joint(model: ClientModel, xs: np.ndarray, ys: np.ndarray, epochs: int,
                batch_size: int, lr: float, rng: np.random.Generator
                ) -> tuple[np.ndarray, np.ndarray, float]:
    """Adam over the concatenated (theta, phi) vector on the plain likelihood."""
    layout = model.layout
    params = np.concatenate([model.theta, model.phi])
    state = AdamState.zeros(params.size)
    n = xs.shape[0]
    epoch_mean = float("nan")
    for _ in range(epochs):
        losses = []
        for idx in minibatch_indices(rng, n, batch_size):
            current = ClientModel(theta=params[:layout.repr_size],
                                  phi=params[layout.repr_size:], layout=layout)
            loss, g_theta, g_phi = nll_and_grad_joint(current, xs[idx], ys[idx])
            params, state = adam_step(state, params,
                                      np.concatenate([g_theta, g_phi]), lr)
            losses.append(loss)
        epoch_mean = float(np.mean(losses))
    return params[:layout.repr_size], params[layout.repr_size:], epoch_mean


def _run_fedavg(cfg, dataset, layout, checkpoint_writer) -> TrainResult:
    base = global_init_model(cfg, layout)
    theta, phi = base.theta, base.phi
    history = RoundHistory()
    result = TrainResult(algorithm=cfg.algorithm, layout=layout, history=history,
                         global_theta=theta, global_phi=phi)
    eligible = eligible_clients(cfg)
    for t in range(cfg.rounds):
        sampled = sample_clients(cfg, t, eligible)

        def task(cid: int):
            split = dataset.clients[cid]
            model = ClientModel(theta=theta.copy(), phi=phi.copy(), layout=layout)
            new_theta, new_phi, loss = train_joint(
                model, split.train.features, split.train.labels,
                cfg.local_epochs, cfg.batch_size, cfg.lr, batch_rng(cfg, t, cid))
            return (new_theta, new_phi), loss

        results, losses, seconds, failed = _run_client_tasks(sampled, task)
        if not results:
            raise NonFiniteLoss(f"every sampled client failed in round {t}")
        ordered = [results[cid] for cid in sorted(results)]
        theta = np.mean([p[0] for p in ordered], axis=0)
        phi = np.mean([p[1] for p in ordered], axis=0)
        history.records.append(RoundRecord(round_index=t, sampled=sampled,
                                           losses=losses, seconds=seconds,
                                           failed=failed))
        result.global_theta, result.global_phi = theta, phi
        _maybe_checkpoint(cfg, checkpoint_writer, result, t + 1, history)
    result.global_theta, result.global_phi = theta, phi
    _maybe_checkpoint(cfg, checkpoint_writer, result, cfg.rounds, history, force=True)
    return result


def _run_local_only(cfg, dataset, layout, checkpoint_writer) -> TrainResult:
    eligible = eligible_clients(cfg)
    models = {i: client_init_model(cfg, layout, i) for i in eligible}
    history = RoundHistory()
    result = TrainResult(algorithm=cfg.algorithm, layout=layout, history=history)
    for t in range(cfg.rounds):
        def task(cid: int):
            split = dataset.clients[cid]
            new_theta, new_phi, loss = train_joint(
                models[cid], split.train.features, split.train.labels,
                cfg.local_epochs, cfg.batch_size, cfg.lr, batch_rng(cfg, t, cid))
            return (new_theta, new_phi), loss

        results, losses, seconds, failed = _run_client_tasks(eligible, task)
        for cid, (new_theta, new_phi) in results.items():
            models[cid] = ClientModel(theta=new_theta, phi=new_phi, layout=layout)
        history.records.append(RoundRecord(round_index=t, sampled=list(eligible),
                                           losses=losses, seconds=seconds,
                                           failed=failed))
    result.client_thetas = [models[i].theta if i in models else None
                            for i in range(dataset.n_clients)]
    result.client_phis = [models[i].phi if i in models else None
                          for i in range(dataset.n_clients)]
    _maybe_checkpoint(cfg, checkpoint_writer, result, cfg.rounds, history, force=True)
    return result


def fine_tune_phi(model: ClientModel, xs: np.ndarray, ys: np.ndarray, epochs: int,
                  batch_size: int, lr: float, rng: np.random.Generator) -> np.ndarray:
    """Adam over phi with theta frozen; zero epochs returns phi unchanged."""
    phi = model.phi.copy()
    state = AdamState.zeros(phi.size)
    n = xs.shape[0]
    for _ in range(epochs):
        for idx in minibatch_indices(rng, n, batch_size):
            loss, grad = nll_and_grad_phi(model.with_phi(phi), xs[idx], ys[idx])
            phi, state = adam_step(state, phi, grad, lr)
    return phi


def finalize_client(client_id: int, g: GlobalDistribution, phi0: np.ndarray,
                    train_x: np.ndarray, train_y: np.ndarray,
                    cfg: ExperimentConfig, layout: LayerLayout
                    ) -> tuple[SubnetPosterior, np.ndarray]:
    """Post-training personalization: fine-tune phi, build the local posterior.

    The posterior is anchored at the global mean (the linearization point
    for prediction) with the subnetwork chosen from the broadcast
    variances; the Gauss-Newton matrix is assembled on the client's own
    split at the fine-tuned decision block.
    """
    if train_x.shape[0] < 1:
        raise ValueError(f"client {client_id} has an empty training split")
    prior = broadcast_prior(g, cfg.alpha)
    size = subnet_size(layout.repr_size, cfg.subnet_ratio)
    mask = select_subnetwork(prior.variance, size)
    anchor = ClientModel(theta=g.mu.copy(), phi=phi0, layout=layout)
    phi_fin = fine_tune_phi(anchor, train_x, train_y, cfg.fine_tune_epochs,
                            cfg.batch_size, cfg.lr, fine_tune_rng(cfg, client_id))
    finalized = anchor.with_phi(phi_fin)
    if size == 0:
        ggn = np.zeros((0, 0))
    elif cfg.algorithm == "fedsi_fac":
        ggn = assemble_ggn_diag(finalized, train_x, mask, prior.variance)
    else:
        ggn = assemble_ggn(finalized, train_x, mask, prior.variance)
    post = subnet_posterior(g.mu, mask, ggn, layout.repr_size)
    return post, phi_fin


@dataclass
class ClientEval:
    client_id: int
    n_test: int
    metrics: dict[str, float]


@dataclass
class EvalReport:
    algorithm: str
    per_client: list[ClientEval]
    pooled_probs: np.ndarray
    pooled_labels: np.ndarray

    def mean_metrics(self) -> dict[str, float]:
        keys = self.per_client[0].metrics.keys()
        return {k: float(np.mean([c.metrics[k] for c in self.per_client]))
                for k in keys}

    def std_metrics(self) -> dict[str, float]:
        keys = self.per_client[0].metrics.keys()
        return {k: float(np.std([c.metrics[k] for c in self.per_client]))
                for k in keys}

    def reliability(self, bins: int):
        return reliability_bins(self.pooled_probs, self.pooled_labels, bins)


def _client_probabilities(cfg: ExperimentConfig, result: TrainResult,
                          dataset: FederatedDataset, client_id: int) -> np.ndarray:
    """Predicted class probabilities on one client's test split."""
    layout = result.layout
    split = dataset.clients[client_id]
    if result.algorithm in ("fedsi", "fedsi_fac"):
        phi0 = client_init_model(cfg, layout, client_id).phi
        post, phi_fin = finalize_client(
            client_id, result.global_dist, phi0,
            split.train.features, split.train.labels, cfg, layout)
        model = ClientModel(theta=result.global_dist.mu.copy(), phi=phi_fin,
                            layout=layout)
        return predictive_classify_batch(model, split.test.features, post)
    if result.algorithm == "fedavg":
        model = ClientModel(theta=result.global_theta, phi=result.global_phi,
                            layout=layout)
        return softmax(forward_batch(model, split.test.features))
    if result.algorithm == "fedavg_ft":
        model = ClientModel(theta=result.global_theta.copy(),
                            phi=result.global_phi.copy(), layout=layout)
        theta, phi, _ = train_joint(
            model, split.train.features, split.train.labels,
            cfg.fine_tune_epochs, cfg.batch_size, cfg.lr,
            fine_tune_rng(cfg, client_id))
        tuned = ClientModel(theta=theta, phi=phi, layout=layout)
        return softmax(forward_batch(tuned, split.test.features))
    if result.algorithm == "local_only":
        theta = result.client_thetas[client_id]
        phi = result.client_phis[client_id]
        if theta is None:
            raise ValueError(f"client {client_id} was not trained in this run")
        model = ClientModel(theta=theta, phi=phi, layout=layout)
        return softmax(forward_batch(model, split.test.features))
    raise ValueError(f"unknown algorithm {result.algorithm!r}")


def evaluate_run(cfg: ExperimentConfig, result: TrainResult,
                 dataset: FederatedDataset) -> EvalReport:
    """Per-client personalization + test metrics for the trained state."""
    per_client = []
    probs_all, labels_all = [], []
    for cid in eligible_clients(cfg):
        split = dataset.clients[cid]
        if len(split.test) == 0:
            continue
        probs = _client_probabilities(cfg, result, dataset, cid)
        per_client.append(ClientEval(
            client_id=cid, n_test=len(split.test),
            metrics=summarize(probs, split.test.labels, cfg.ece_bins)))
        probs_all.append(probs)
        labels_all.append(split.test.labels)
    if not per_client:
        raise ValueError("no client had test data to evaluate")
    return EvalReport(algorithm=result.algorithm, per_client=per_client,
                      pooled_probs=np.concatenate(probs_all),
                      pooled_labels=np.concatenate(labels_all))


def evaluate_novel_client(cfg: ExperimentConfig, result: TrainResult,
                          dataset: FederatedDataset) -> ClientEval:
    """Fit only the decision block of the held-out client, then test it.

    Requires a run that excluded cfg.novel_client from training.
    """
    cid = cfg.novel_client
    if cid is None:
        raise ValueError("config does not name a novel client")
    split = dataset.clients[cid]
    if len(split.train) == 0:
        raise ValueError("novel client has an empty training split")
    layout = result.layout
    if result.algorithm in ("fedsi", "fedsi_fac"):
        phi0 = client_init_model(cfg, layout, cid).phi
        post, phi_fin = finalize_client(cid, result.global_dist, phi0,
                                        split.train.features, split.train.labels,
                                        cfg, layout)
        model = ClientModel(theta=result.global_dist.mu.copy(), phi=phi_fin,
                            layout=layout)
        probs = predictive_classify_batch(model, split.test.features, post)
    elif result.algorithm in ("fedavg", "fedavg_ft"):
        model = ClientModel(theta=result.global_theta.copy(),
                            phi=result.global_phi.copy(), layout=layout)
        theta, phi, _ = train_joint(model, split.train.features, split.train.labels,
                                    cfg.fine_tune_epochs, cfg.batch_size, cfg.lr,
                                    fine_tune_rng(cfg, cid))
        probs = softmax(forward_batch(
            ClientModel(theta=theta, phi=phi, layout=layout), split.test.features))
    else:
        raise ValueError(f"novel-client evaluation undefined for {result.algorithm!r}")
    return ClientEval(client_id=cid, n_test=len(split.test),
                      metrics=summarize(probs, split.test.labels, cfg.ece_bins))


def novel_local_baseline(cfg: ExperimentConfig, dataset: FederatedDataset,
                         layout: LayerLayout) -> ClientEval:
    """Freshly initialized model trained on the novel client alone.

    Gets the same optimization budget as the novel-client fine-tune, so it
    is the communication-free comparator for generalization experiments.
    """
    cid = cfg.novel_client
    if cid is None:
        raise ValueError("config does not name a novel client")
    split = dataset.clients[cid]
    model = client_init_model(cfg, layout, cid)
    theta, phi, _ = train_joint(model, split.train.features, split.train.labels,
                                cfg.fine_tune_epochs, cfg.batch_size, cfg.lr,
                                fine_tune_rng(cfg, cid))
    probs = softmax(forward_batch(
        ClientModel(theta=theta, phi=phi, layout=layout), split.test.features))
    return ClientEval(client_id=cid, n_test=len(split.test),
                      metrics=summarize(probs, split.test.labels, cfg.ece_bins))
