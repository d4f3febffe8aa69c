"""Subnetwork posterior inference and linearized predictive distributions.

The pipeline implemented here: train a MAP estimate of the representation
block under a Gaussian prior, pick the subnetwork whose exclusion cost
(diagonal 2-Wasserstein distance) is minimal, assemble a Gauss-Newton
precision over the selected coordinates, and turn its Cholesky factor
into calibrated class probabilities or regression variances.

Everything is a pure function; posteriors are frozen dataclasses and safe
to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite, SizeTooLarge
from .linalg import JITTER_SCALES, CholeskyFactor, cholesky_with_jitter, inverse_factor
from .model import (
    AdamState,
    ClientModel,
    adam_step,
    forward_batch,
    jacobian_batch,
    minibatch_indices,
    nll_and_grad,
    softmax,
)

# Rows are accumulated into the Gauss-Newton product in chunks of this many
# (example, output) pairs to bound transient memory.
_GGN_CHUNK_ROWS = 4096


@dataclass(frozen=True)
class GaussianPriorView:
    """Elementwise Gaussian over the representation block (mean, variance)."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.variance.shape or self.mean.ndim != 1:
            raise DimensionMismatch("prior mean and variance must be equal-length vectors")
        if not np.all(self.variance > 0.0):
            raise ValueError("prior variances must be strictly positive")


@dataclass(frozen=True)
class SubnetPosterior:
    """Gaussian over the masked coordinates; everything off-mask is a point mass.

    Exactly one of `precision_chol` (dense lower Cholesky factor of the
    precision) or `precision_diag` (factorized variant) is set.  `mean`
    holds the masked slice of the anchor vector; `repr_size` remembers the
    full representation length so marginals can be scattered back.
    """

    mask: np.ndarray
    mean: np.ndarray
    repr_size: int
    precision_chol: CholeskyFactor | None = None
    precision_diag: np.ndarray | None = None

    def __post_init__(self):
        if (self.precision_chol is None) == (self.precision_diag is None):
            raise ValueError("exactly one of precision_chol/precision_diag must be set")
        k = self.mask.size
        if self.mean.shape != (k,):
            raise DimensionMismatch(f"mean has shape {self.mean.shape}, expected ({k},)")
        if self.precision_chol is not None and self.precision_chol.dim != k:
            raise DimensionMismatch("precision factor dimension disagrees with mask size")
        if self.precision_diag is not None and self.precision_diag.shape != (k,):
            raise DimensionMismatch("precision diagonal disagrees with mask size")

    @property
    def size(self) -> int:
        return int(self.mask.size)

    def subnet_variances(self) -> np.ndarray:
        """Marginal posterior variances on the masked coordinates."""
        if self.precision_diag is not None:
            return 1.0 / self.precision_diag
        inv = inverse_factor(self.precision_chol)
        return np.einsum("ij,ij->j", inv, inv)

    def whiten_jacobian(self, jac: np.ndarray) -> np.ndarray:
        """Return V with V.T @ V = jac @ H^-1 @ jac.T for jac of shape (o, |S|)."""
        if jac.ndim != 2 or jac.shape[1] != self.size:
            raise DimensionMismatch(
                f"jacobian has shape {jac.shape}, expected (o, {self.size})")
        if self.size == 0:
            return np.zeros((0, jac.shape[0]))
        if self.precision_diag is not None:
            return jac.T / np.sqrt(self.precision_diag)[:, None]
        return solve_triangular(self.precision_chol.lower, jac.T, lower=True)


def map_train(model: ClientModel, xs: np.ndarray, ys: np.ndarray,
              prior: GaussianPriorView, epochs: int, batch_size: int,
              lr: float, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Adam on the penalized likelihood over theta; phi stays fixed.

    Returns the trained representation vector and the mean per-batch loss
    of the final epoch.  Deterministic given the generator state.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = xs.shape[0]
    if n == 0:
        raise ValueError("training split is empty")
    theta = model.theta.copy()
    state = AdamState.zeros(theta.size)
    epoch_mean = np.nan
    for _ in range(epochs):
        losses = []
        for idx in minibatch_indices(rng, n, batch_size):
            loss, grad = nll_and_grad(model.with_theta(theta), xs[idx], ys[idx], prior)
            theta, state = adam_step(state, theta, grad, lr)
            losses.append(loss)
        epoch_mean = float(np.mean(losses))
    return theta, epoch_mean


def select_subnetwork(variances: np.ndarray, size: int) -> np.ndarray:
    """Indices of the `size` largest variances, ascending; ties to lowest index."""
    variances = np.asarray(variances, dtype=np.float64)
    if variances.ndim != 1:
        raise DimensionMismatch("variances must be a vector")
    if np.any(variances < 0.0):
        raise ValueError("variances must be nonnegative")
    if not 0 <= size <= variances.size:
        raise SizeTooLarge(
            f"requested subnetwork of {size} from {variances.size} parameters")
    if size == 0:
        return np.zeros(0, dtype=np.int64)
    # Stable sort on negated values keeps the lowest index first among ties.
    order = np.argsort(-variances, kind="stable")[:size]
    return np.sort(order).astype(np.int64)


def subnet_size(repr_size: int, ratio: float) -> int:
    """round(ratio * repr_size) with a floor of one parameter unless ratio is 0."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("subnetwork ratio must lie in [0, 1]")
    if ratio == 0.0:
        return 0
    return min(repr_size, max(1, int(ratio * repr_size + 0.5)))


def wasserstein_diag(variances: np.ndarray, mask: np.ndarray) -> float:
    """Total variance left outside the mask (diagonal transport cost)."""
    variances = np.asarray(variances, dtype=np.float64)
    keep = np.ones(variances.size, dtype=bool)
    keep[np.asarray(mask, dtype=np.int64)] = False
    return float(variances[keep].sum())


def lambda_softmax(logits: np.ndarray) -> np.ndarray:
    """Negative log-likelihood curvature of the categorical likelihood.

    diag(p) - p p^T at p = softmax(logits); symmetric positive
    semidefinite with rank at most output_dim - 1.
    """
    p = softmax(np.asarray(logits, dtype=np.float64))
    return np.diag(p) - np.outer(p, p)


def _lambda_sqrt_factors(logits: np.ndarray, likelihood: str, noise: float
                         ) -> np.ndarray:
    """Per-example matrices Q with Q.T @ Q equal to the curvature matrix."""
    n, out_dim = logits.shape
    if likelihood == "categorical":
        qs = np.empty((n, out_dim, out_dim))
        for i in range(n):
            lam = lambda_softmax(logits[i])
            vals, vecs = np.linalg.eigh(lam)
            qs[i] = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
        return qs
    if likelihood == "gaussian":
        if noise <= 0.0:
            raise ValueError("gaussian likelihood needs noise variance > 0")
        eye = np.eye(out_dim) / np.sqrt(noise)
        return np.broadcast_to(eye, (n, out_dim, out_dim))
    raise ValueError(f"unknown likelihood {likelihood!r}")


def _whitened_jacobian_rows(model: ClientModel, xs: np.ndarray, mask: np.ndarray,
                            likelihood: str, noise: float):
    """Yield chunks of curvature-whitened Jacobian rows, ((k*o), |S|) each."""
    out_dim = model.layout.output_dim
    step = max(1, _GGN_CHUNK_ROWS // max(out_dim, 1))
    for start in range(0, xs.shape[0], step):
        chunk = xs[start:start + step]
        logits = forward_batch(model, chunk)
        qs = _lambda_sqrt_factors(logits, likelihood, noise)
        jacs = jacobian_batch(model, chunk, mask)          # (k, O, |S|)
        rows = np.einsum("nop,nps->nos", qs, jacs)
        yield rows.reshape(-1, mask.size)


def assemble_ggn(model: ClientModel, xs: np.ndarray, mask: np.ndarray,
                 prior_variances: np.ndarray, likelihood: str = "categorical",
                 noise: float = 1.0) -> np.ndarray:
    """Dense Gauss-Newton precision over the masked coordinates.

    sum_n J_n[mask].T @ Lambda_n @ J_n[mask] + diag(1 / prior_variances[mask]),
    accumulated in one pass over the full split at the current parameters.
    The result is exactly symmetric.
    """
    prior_variances = np.asarray(prior_variances, dtype=np.float64)
    if prior_variances.shape != (model.layout.repr_size,):
        raise DimensionMismatch("prior variance vector must cover the representation block")
    if np.any(prior_variances <= 0.0):
        raise ValueError("prior variances must be strictly positive")
    mask = np.asarray(mask, dtype=np.int64)
    k = mask.size
    h = np.zeros((k, k))
    for rows in _whitened_jacobian_rows(model, xs, mask, likelihood, noise):
        h += rows.T @ rows
    h = np.tril(h) + np.tril(h, -1).T
    h[np.diag_indices(k)] += 1.0 / prior_variances[mask]
    return h


def assemble_ggn_diag(model: ClientModel, xs: np.ndarray, mask: np.ndarray,
                      prior_variances: np.ndarray, likelihood: str = "categorical",
                      noise: float = 1.0) -> np.ndarray:
    """Diagonal of the Gauss-Newton precision (factorized-posterior variant)."""
    prior_variances = np.asarray(prior_variances, dtype=np.float64)
    if np.any(prior_variances <= 0.0):
        raise ValueError("prior variances must be strictly positive")
    mask = np.asarray(mask, dtype=np.int64)
    diag = np.zeros(mask.size)
    for rows in _whitened_jacobian_rows(model, xs, mask, likelihood, noise):
        diag += np.einsum("ij,ij->j", rows, rows)
    return diag + 1.0 / prior_variances[mask]


def subnet_posterior(theta_anchor: np.ndarray, mask: np.ndarray, ggn: np.ndarray,
                     repr_size: int | None = None) -> SubnetPosterior:
    """Wrap an assembled precision into a posterior anchored at theta_anchor[mask].

    `ggn` may be the dense matrix (full-covariance posterior) or its
    diagonal (factorized posterior); the distinction is preserved so that
    downstream algebra stays cheap for the factorized variant.
    """
    theta_anchor = np.asarray(theta_anchor, dtype=np.float64)
    if repr_size is None:
        repr_size = theta_anchor.size
    mask = np.asarray(mask, dtype=np.int64)
    ggn = np.asarray(ggn, dtype=np.float64)
    mean = theta_anchor[mask]
    if ggn.ndim == 2:
        return SubnetPosterior(mask=mask, mean=mean, repr_size=repr_size,
                               precision_chol=cholesky_with_jitter(ggn))
    if ggn.ndim != 1 or ggn.shape != (mask.size,):
        raise DimensionMismatch(f"precision has shape {ggn.shape}, expected matrix "
                                f"or ({mask.size},) diagonal")
    if np.any(ggn <= 0.0):
        base = float(np.abs(ggn).mean()) or 1.0
        for scale in JITTER_SCALES:
            if np.all(ggn + scale * base > 0.0):
                ggn = ggn + scale * base
                break
        else:
            raise NotPositiveDefinite(int(np.argmin(ggn)), "diagonal precision not positive")
    return SubnetPosterior(mask=mask, mean=mean, repr_size=repr_size,
                           precision_diag=ggn)


def marginal_variances(post: SubnetPosterior) -> np.ndarray:
    """Posterior marginals scattered into the full representation vector.

    Off-mask coordinates are deterministic and report exactly zero.
    """
    out = np.zeros(post.repr_size)
    if post.size:
        out[post.mask] = post.subnet_variances()
    return out


def lowrank_subnet_variances(model: ClientModel, xs: np.ndarray, mask: np.ndarray,
                             prior_variances: np.ndarray,
                             likelihood: str = "categorical",
                             noise: float = 1.0) -> np.ndarray:
    """Marginal variances of the dense-precision posterior via the identity
    diag((D^-1 + B^T B)^-1) = d - d^2 * diag(B^T (I + B D B^T)^-1 B).

    Equivalent to inverting the assembled matrix but costs
    O(m^2 |S| + m^3) for m whitened rows instead of O(|S|^3), which is the
    regime of every training round (few local examples, wide subnetwork).
    """
    mask = np.asarray(mask, dtype=np.int64)
    d = np.asarray(prior_variances, dtype=np.float64)[mask]
    rows = [r for r in _whitened_jacobian_rows(model, xs, mask, likelihood, noise)]
    if not rows:
        return d.copy()
    b = np.concatenate(rows, axis=0)
    m = b.shape[0]
    cap = np.eye(m) + (b * d) @ b.T
    cap = np.tril(cap) + np.tril(cap, -1).T
    factor = cholesky_with_jitter(cap)
    w = solve_triangular(factor.lower, b, lower=True)
    correction = d * d * np.einsum("ij,ij->j", w, w)
    # Exact-arithmetic marginals are positive; guard the subtraction.
    return np.maximum(d - correction, d * 1e-16)


def predictive_covariance(model: ClientModel, x: np.ndarray,
                          post: SubnetPosterior) -> np.ndarray:
    """Output-space covariance J H^-1 J.T of the linearized model at one input."""
    jac = jacobian_batch(model, np.asarray(x, dtype=np.float64)[None, :], post.mask)[0]
    if post.size == 0:
        return np.zeros((model.layout.output_dim, model.layout.output_dim))
    v = post.whiten_jacobian(jac)
    return v.T @ v


def probit_scale(cov_diag: np.ndarray) -> np.ndarray:
    """Logit shrink factors (1 + pi * variance / 8)^(-1/2)."""
    return 1.0 / np.sqrt(1.0 + np.pi * cov_diag / 8.0)


def predictive_classify(model: ClientModel, x: np.ndarray,
                        post: SubnetPosterior) -> np.ndarray:
    """Class probabilities with probit-scaled logits at the linearization point.

    model.theta is the global mean the posterior was built around;
    model.phi is the personalized decision block.
    """
    return predictive_classify_batch(model, np.asarray(x, dtype=np.float64)[None, :],
                                     post)[0]


def predictive_classify_batch(model: ClientModel, xs: np.ndarray,
                              post: SubnetPosterior) -> np.ndarray:
    """Vectorized probit-scaled probabilities, shape (n, output_dim)."""
    xs = np.asarray(xs, dtype=np.float64)
    logits = forward_batch(model, xs)
    if post.size == 0:
        return softmax(logits)
    out_dim = model.layout.output_dim
    cov_diag = np.empty_like(logits)
    step = max(1, _GGN_CHUNK_ROWS // max(out_dim, 1))
    for start in range(0, xs.shape[0], step):
        chunk = xs[start:start + step]
        jacs = jacobian_batch(model, chunk, post.mask)      # (k, O, |S|)
        stacked = jacs.reshape(-1, post.size)
        v = post.whiten_jacobian(stacked)                   # (|S|, k*O)
        cov_diag[start:start + step] = np.einsum(
            "ij,ij->j", v, v).reshape(-1, out_dim)
    return softmax(probit_scale(cov_diag) * logits)


def predictive_regress(model: ClientModel, x: np.ndarray, post: SubnetPosterior,
                       noise: float) -> tuple[float, float]:
    """Gaussian predictive (mean, variance) for scalar-output models."""
    if model.layout.output_dim != 1:
        raise DimensionMismatch("regression predictive requires output_dim == 1")
    if noise < 0.0:
        raise ValueError("observation noise must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    mean = float(forward_batch(model, x[None, :])[0, 0])
    var = float(predictive_covariance(model, x, post)[0, 0]) + noise
    return mean, var
