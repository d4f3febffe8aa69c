"""Single-hidden-layer ReLU MLP with a representation/decision split.

The hidden layer (weights + bias) is the *representation* block, flattened
into one vector ``theta``; the output layer is the *decision* block
``phi``.  Forward passes, log-likelihood gradients, and per-example output
Jacobians are written out by hand so that every derivative used by the
posterior inference is explicit and testable against finite differences.

Flattening order is fixed and global: hidden weights row-major, then
hidden biases; decision weights row-major, then decision biases.  Client
masks and server aggregation rely on this order being identical
everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, IndexOutOfRange, NonFiniteLoss

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LayerLayout:
    """Dimensions plus the flat-index layout of both parameter blocks."""

    input_dim: int
    hidden_dim: int
    output_dim: int

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def repr_size(self) -> int:
        return self.input_dim * self.hidden_dim + self.hidden_dim

    @property
    def decision_size(self) -> int:
        return self.hidden_dim * self.output_dim + self.output_dim

    def theta_coordinate(self, flat_index: int) -> tuple[int, int, int]:
        """Map a flat representation index to (layer id, row, col).

        Layer 0 is the hidden weight matrix (hidden_dim x input_dim),
        layer 1 the hidden bias vector (col is always 0).
        """
        nw = self.input_dim * self.hidden_dim
        if not 0 <= flat_index < self.repr_size:
            raise IndexOutOfRange(f"theta index {flat_index} not in [0, {self.repr_size})")
        if flat_index < nw:
            return (0, flat_index // self.input_dim, flat_index % self.input_dim)
        return (1, flat_index - nw, 0)

    def theta_flat_index(self, layer: int, row: int, col: int) -> int:
        if layer == 0:
            if not (0 <= row < self.hidden_dim and 0 <= col < self.input_dim):
                raise IndexOutOfRange(f"weight coordinate ({row}, {col}) out of range")
            return row * self.input_dim + col
        if layer == 1:
            if not (0 <= row < self.hidden_dim and col == 0):
                raise IndexOutOfRange(f"bias coordinate ({row}, {col}) out of range")
            return self.input_dim * self.hidden_dim + row
        raise IndexOutOfRange(f"representation block has no layer {layer}")

    def unpack_theta(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """View theta as (hidden weights, hidden bias)."""
        nw = self.input_dim * self.hidden_dim
        w1 = theta[:nw].reshape(self.hidden_dim, self.input_dim)
        return w1, theta[nw:]

    def unpack_phi(self, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """View phi as (decision weights, decision bias)."""
        nw = self.hidden_dim * self.output_dim
        w2 = phi[:nw].reshape(self.output_dim, self.hidden_dim)
        return w2, phi[nw:]


@dataclass(frozen=True)
class ClientModel:
    """Flat parameter vectors for one client; treated as immutable."""

    theta: np.ndarray
    phi: np.ndarray
    layout: LayerLayout

    def __post_init__(self):
        if self.theta.shape != (self.layout.repr_size,):
            raise DimensionMismatch(
                f"theta has shape {self.theta.shape}, expected ({self.layout.repr_size},)")
        if self.phi.shape != (self.layout.decision_size,):
            raise DimensionMismatch(
                f"phi has shape {self.phi.shape}, expected ({self.layout.decision_size},)")
        if not (np.isfinite(self.theta).all() and np.isfinite(self.phi).all()):
            raise ValueError("model parameters must be finite")

    def with_theta(self, theta: np.ndarray) -> "ClientModel":
        return replace(self, theta=np.asarray(theta, dtype=np.float64))

    def with_phi(self, phi: np.ndarray) -> "ClientModel":
        return replace(self, phi=np.asarray(phi, dtype=np.float64))


def init_model(layout: LayerLayout, seed) -> ClientModel:
    """He-normal weights (scale sqrt(2/fan_in)), zero biases, fixed draw order."""
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, np.sqrt(2.0 / layout.input_dim),
                    size=(layout.hidden_dim, layout.input_dim))
    w2 = rng.normal(0.0, np.sqrt(2.0 / layout.hidden_dim),
                    size=(layout.output_dim, layout.hidden_dim))
    theta = np.concatenate([w1.ravel(), np.zeros(layout.hidden_dim)])
    phi = np.concatenate([w2.ravel(), np.zeros(layout.output_dim)])
    return ClientModel(theta=theta, phi=phi, layout=layout)


def forward(model: ClientModel, x: np.ndarray) -> np.ndarray:
    """Logits for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.layout.input_dim,):
        raise DimensionMismatch(
            f"input has shape {x.shape}, expected ({model.layout.input_dim},)")
    if not np.isfinite(x).all():
        raise ValueError("input features must be finite")
    return forward_batch(model, x[None, :])[0]


def forward_batch(model: ClientModel, xs: np.ndarray) -> np.ndarray:
    """Logits for a batch, shape (n, output_dim)."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != model.layout.input_dim:
        raise DimensionMismatch(
            f"batch has shape {xs.shape}, expected (n, {model.layout.input_dim})")
    w1, b1 = model.layout.unpack_theta(model.theta)
    w2, b2 = model.layout.unpack_phi(model.phi)
    hidden = np.maximum(xs @ w1.T + b1, 0.0)
    return hidden @ w2.T + b2


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _forward_trace(model: ClientModel, xs: np.ndarray):
    """Forward pass keeping the intermediates backprop needs."""
    w1, b1 = model.layout.unpack_theta(model.theta)
    w2, b2 = model.layout.unpack_phi(model.phi)
    z1 = xs @ w1.T + b1
    hidden = np.maximum(z1, 0.0)
    logits = hidden @ w2.T + b2
    return w2, z1, hidden, logits


def _residuals(logits: np.ndarray, ys: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed categorical negative log-likelihood and d(loss)/d(logits)."""
    logp = log_softmax(logits)
    n = logits.shape[0]
    nll = -float(logp[np.arange(n), ys].sum())
    delta = np.exp(logp)
    delta[np.arange(n), ys] -= 1.0
    return nll, delta


def nll_and_grad(model: ClientModel, xs: np.ndarray, ys: np.ndarray,
                 prior=None) -> tuple[float, np.ndarray]:
    """Summed batch NLL plus Gaussian prior penalty; gradient over theta only.

    The prior contributes 0.5 * sum((theta - mean)^2 / variance) to the
    loss (its theta-independent normalizer is dropped) and
    (theta - mean) / variance to the gradient.  `prior` is any object with
    `mean` and `variance` vectors of length repr_size, or None for a pure
    data-likelihood objective.  The decision block is held fixed.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("batch must be a nonempty (n, input_dim) array")
    if xs.shape[0] != ys.shape[0]:
        raise DimensionMismatch("features and labels disagree on batch size")
    # Divergence is reported through NonFiniteLoss, so overflow on the way
    # there is expected and checked, not a warning.
    with np.errstate(over="ignore", invalid="ignore"):
        w2, z1, _, logits = _forward_trace(model, xs)
        loss, delta = _residuals(logits, ys)
        dz1 = (delta @ w2) * (z1 > 0.0)
        grad = np.concatenate([(dz1.T @ xs).ravel(), dz1.sum(axis=0)])
        if prior is not None:
            pulled = model.theta - prior.mean
            scaled = pulled / prior.variance
            loss += 0.5 * float(pulled @ scaled)
            grad += scaled
    if not np.isfinite(loss) or not np.isfinite(grad).all():
        raise NonFiniteLoss(f"loss diverged (loss={loss})")
    return loss, grad


def nll_and_grad_joint(model: ClientModel, xs: np.ndarray, ys: np.ndarray
                       ) -> tuple[float, np.ndarray, np.ndarray]:
    """Pure data NLL with gradients over both theta and phi (baseline training)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("batch must be a nonempty (n, input_dim) array")
    with np.errstate(over="ignore", invalid="ignore"):
        w2, z1, hidden, logits = _forward_trace(model, xs)
        loss, delta = _residuals(logits, ys)
        dz1 = (delta @ w2) * (z1 > 0.0)
        grad_theta = np.concatenate([(dz1.T @ xs).ravel(), dz1.sum(axis=0)])
        grad_phi = np.concatenate([(delta.T @ hidden).ravel(), delta.sum(axis=0)])
    if not (np.isfinite(loss) and np.isfinite(grad_theta).all()
            and np.isfinite(grad_phi).all()):
        raise NonFiniteLoss(f"loss diverged (loss={loss})")
    return loss, grad_theta, grad_phi


def nll_and_grad_phi(model: ClientModel, xs: np.ndarray, ys: np.ndarray
                     ) -> tuple[float, np.ndarray]:
    """Pure data NLL with gradient over phi only (decision-layer fine-tuning)."""
    loss, _, grad_phi = nll_and_grad_joint(model, xs, ys)
    return loss, grad_phi


def _validate_mask(mask: np.ndarray, repr_size: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.ndim != 1:
        raise IndexOutOfRange("mask must be a 1-d index array")
    if mask.size:
        if mask[0] < 0 or mask[-1] >= repr_size:
            raise IndexOutOfRange(
                f"mask indices must lie in [0, {repr_size}), got [{mask[0]}, {mask[-1]}]")
        if not np.all(np.diff(mask) > 0):
            raise IndexOutOfRange("mask indices must be strictly increasing")
    return mask


def _mask_gather_arrays(layout: LayerLayout, mask: np.ndarray
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Per mask entry: the hidden unit it feeds, and the input column (-1 for bias)."""
    nw = layout.input_dim * layout.hidden_dim
    units = np.where(mask < nw, mask // layout.input_dim, mask - nw)
    cols = np.where(mask < nw, mask % layout.input_dim, -1)
    return units, cols


def per_sample_jacobian(model: ClientModel, x: np.ndarray, mask: np.ndarray
                        ) -> np.ndarray:
    """d(logits)/d(theta[mask]) for one input, shape (output_dim, len(mask)).

    For this architecture the column for weight (r, c) is
    w2[:, r] * relu'(z1[r]) * x[c] and the column for bias r drops the
    x[c] factor, so the Jacobian is assembled directly from the forward
    intermediates.  The ReLU subgradient at exactly zero is taken as zero.
    """
    mask = _validate_mask(mask, model.layout.repr_size)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.layout.input_dim,):
        raise DimensionMismatch(
            f"input has shape {x.shape}, expected ({model.layout.input_dim},)")
    return jacobian_batch(model, x[None, :], mask)[0]


def jacobian_batch(model: ClientModel, xs: np.ndarray, mask: np.ndarray
                   ) -> np.ndarray:
    """Stacked per-example Jacobians, shape (n, output_dim, len(mask))."""
    mask = _validate_mask(mask, model.layout.repr_size)
    xs = np.asarray(xs, dtype=np.float64)
    n = xs.shape[0]
    if mask.size == 0:
        return np.zeros((n, model.layout.output_dim, 0))
    w1, b1 = model.layout.unpack_theta(model.theta)
    w2, _ = model.layout.unpack_phi(model.phi)
    gate = ((xs @ w1.T + b1) > 0.0).astype(np.float64)
    units, cols = _mask_gather_arrays(model.layout, mask)
    # inputs[n, j]: x[n, col_j] for weight entries, 1 for bias entries
    inputs = np.where(cols >= 0, xs[:, np.clip(cols, 0, None)], 1.0)
    scale = gate[:, units] * inputs                      # (n, |S|)
    return w2[:, units][None, :, :] * scale[:, None, :]  # (n, O, |S|)


def minibatch_indices(rng: np.random.Generator, n: int, batch_size: int):
    """Yield one epoch of shuffled minibatch index arrays.

    A permutation is always drawn, even when a single batch covers the
    epoch, so that consumers sharing a generator stay in lockstep.
    """
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), step=0)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float
              ) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns the new parameters and state."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise DimensionMismatch("parameter, gradient, and state shapes must agree")
    t = state.step + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new_params, AdamState(m=m, v=v, step=t)
