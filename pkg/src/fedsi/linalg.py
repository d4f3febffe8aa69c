"""Dense symmetric linear algebra with explicit failure semantics.

Thin, checked wrappers around LAPACK (via scipy) for the handful of
operations the posterior inference needs: Cholesky factorization, solves
against a factor, and symmetric inversion.  All matrices are float64,
row-major numpy arrays.  Everything here is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_lapack_funcs, solve_triangular

from .errors import DimensionMismatch, NotPositiveDefinite

# Relative jitter ladder applied when a Gauss-Newton matrix is numerically
# indefinite.  The underlying matrix is positive definite in exact
# arithmetic, so escalating jitter is a repair, not a model change.
JITTER_SCALES = (1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L @ L.T equal to the source matrix."""

    lower: np.ndarray

    def __post_init__(self):
        lower = self.lower
        if lower.ndim != 2 or lower.shape[0] != lower.shape[1]:
            raise DimensionMismatch(f"factor must be square, got {lower.shape}")
        if lower.shape[0] and not np.all(np.diag(lower) > 0):
            raise ValueError("factor diagonal must be strictly positive")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def _as_square_float64(a: np.ndarray, name: str = "a") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {a.shape}")
    return a


def _check_symmetric(a: np.ndarray, rel_tol: float = 1e-9) -> None:
    if a.size == 0:
        return
    scale = max(1.0, float(np.abs(a).max()))
    asym = float(np.abs(a - a.T).max())
    if asym > rel_tol * scale:
        raise ValueError(
            f"matrix is not symmetric: max asymmetry {asym:.3e} exceeds {rel_tol:.0e} relative")


def cholesky(a: np.ndarray) -> CholeskyFactor:
    """Factor a symmetric positive definite matrix as L @ L.T.

    Raises NotPositiveDefinite with the zero-based index of the first
    non-positive pivot; callers that know their matrix is PD in exact
    arithmetic should retry through `cholesky_with_jitter`.
    """
    a = _as_square_float64(a)
    _check_symmetric(a)
    if a.shape[0] == 0:
        return CholeskyFactor(np.zeros((0, 0)))
    (potrf,) = get_lapack_funcs(("potrf",), (a,))
    c, info = potrf(a, lower=True, overwrite_a=False, clean=True)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:
        raise ValueError(f"illegal value in argument {-info} of LAPACK potrf")
    return CholeskyFactor(c)


def cholesky_with_jitter(a: np.ndarray) -> CholeskyFactor:
    """Cholesky with escalating diagonal jitter relative to the mean diagonal.

    Retries with a + eps*I for eps in JITTER_SCALES (scaled by the mean
    diagonal magnitude), then re-raises the last failure.
    """
    try:
        return cholesky(a)
    except NotPositiveDefinite:
        pass
    a = _as_square_float64(a)
    base = float(np.abs(np.diag(a)).mean()) if a.shape[0] else 1.0
    if base == 0.0:
        base = 1.0
    last: NotPositiveDefinite | None = None
    for scale in JITTER_SCALES:
        try:
            return cholesky(a + (scale * base) * np.eye(a.shape[0]))
        except NotPositiveDefinite as exc:
            last = exc
    assert last is not None
    raise last


def chol_solve(f: CholeskyFactor, b: np.ndarray) -> np.ndarray:
    """Solve (L @ L.T) x = b for x; b may be a vector or a matrix."""
    b = np.asarray(b, dtype=np.float64)
    rows = b.shape[0] if b.ndim else -1
    if b.ndim not in (1, 2) or rows != f.dim:
        raise DimensionMismatch(
            f"right-hand side has {rows} rows, factor dimension is {f.dim}")
    if f.dim == 0:
        return b.copy()
    y = solve_triangular(f.lower, b, lower=True)
    return solve_triangular(f.lower, y, lower=True, trans="T")


def sym_inverse(a: np.ndarray) -> np.ndarray:
    """Invert a symmetric positive definite matrix; result is exactly symmetric."""
    f = cholesky(a)
    if f.dim == 0:
        return np.zeros((0, 0))
    (potri,) = get_lapack_funcs(("potri",), (f.lower,))
    inv, info = potri(f.lower, lower=True, overwrite_c=False)
    if info != 0:
        raise NotPositiveDefinite(abs(info) - 1, "inversion failed after factorization")
    # potri fills one triangle only; mirror it.
    inv = np.tril(inv) + np.tril(inv, -1).T
    return inv


def inverse_factor(f: CholeskyFactor) -> np.ndarray:
    """Return L^-1 for a lower-triangular factor (dense)."""
    if f.dim == 0:
        return np.zeros((0, 0))
    (trtri,) = get_lapack_funcs(("trtri",), (f.lower,))
    inv, info = trtri(f.lower, lower=True, unitdiag=False, overwrite_c=False)
    if info != 0:
        raise NotPositiveDefinite(abs(info) - 1, "triangular inversion failed")
    return np.tril(inv)
