"""Factorization, solve, and inversion contracts for the dense linalg layer."""

import numpy as np
import pytest

from fedsi.errors import DimensionMismatch, NotPositiveDefinite
from fedsi.linalg import (
    chol_solve,
    cholesky,
    cholesky_with_jitter,
    inverse_factor,
    sym_inverse,
)


class TestCholesky:
    def test_identity(self):
        f = cholesky(np.eye(3))
        np.testing.assert_array_equal(f.lower, np.eye(3))

    def test_two_by_two_factor(self):
        # Hand factorization: L00 = 2, L10 = 1, L11 = sqrt(3 - 1).
        a = np.array([[4.0, 2.0], [2.0, 3.0]])
        f = cholesky(a)
        np.testing.assert_allclose(f.lower, [[2.0, 0.0], [1.0, np.sqrt(2.0)]],
                                   rtol=0, atol=1e-15)
        np.testing.assert_allclose(f.lower @ f.lower.T, a, rtol=1e-12)

    def test_indefinite_reports_pivot(self):
        # Eigenvalues of [[1,2],[2,1]] are 3 and -1; the second pivot fails.
        with pytest.raises(NotPositiveDefinite) as info:
            cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert info.value.pivot == 1

    def test_rejects_nonsquare_and_asymmetric(self):
        with pytest.raises(DimensionMismatch):
            cholesky(np.ones((2, 3)))
        with pytest.raises(ValueError):
            cholesky(np.array([[1.0, 0.5], [0.1, 1.0]]))

    def test_random_spd_reconstruction(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            dim = int(rng.integers(1, 33))
            b = rng.normal(size=(dim, dim))
            a = b.T @ b + np.eye(dim)
            f = cholesky(a)
            err = np.linalg.norm(f.lower @ f.lower.T - a) / np.linalg.norm(a)
            assert err < 1e-8

    def test_empty_matrix(self):
        assert cholesky(np.zeros((0, 0))).dim == 0


class TestCholSolve:
    def test_identity_factor_returns_rhs(self):
        f = cholesky(np.eye(4))
        b = np.arange(8.0).reshape(4, 2)
        np.testing.assert_array_equal(chol_solve(f, b), b)

    def test_two_by_two_solution(self):
        # [[4,2],[2,3]] x = [1,0]  =>  x = [0.375, -0.25] (2x2 inverse by hand).
        f = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
        x = chol_solve(f, np.array([[1.0], [0.0]]))
        np.testing.assert_allclose(x, [[0.375], [-0.25]], rtol=1e-14)

    def test_dimension_mismatch(self):
        f = cholesky(np.eye(2))
        with pytest.raises(DimensionMismatch):
            chol_solve(f, np.ones((3, 1)))

    def test_agrees_with_inverse(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            dim = int(rng.integers(1, 16))
            b = rng.normal(size=(dim, dim))
            a = b.T @ b + np.eye(dim)
            rhs = rng.normal(size=(dim, 3))
            x = chol_solve(cholesky(a), rhs)
            residual = np.linalg.norm(a @ x - rhs) / np.linalg.norm(rhs)
            assert residual < 1e-8
            np.testing.assert_allclose(x, sym_inverse(a) @ rhs, atol=1e-8)


class TestSymInverse:
    def test_identity_and_diagonal(self):
        np.testing.assert_array_equal(sym_inverse(np.eye(3)), np.eye(3))
        np.testing.assert_allclose(sym_inverse(np.diag([2.0, 4.0])),
                                   np.diag([0.5, 0.25]), rtol=1e-15)

    def test_two_by_two_closed_form(self):
        # inv([[4,2],[2,3]]) = [[3,-2],[-2,4]] / 8.
        inv = sym_inverse(np.array([[4.0, 2.0], [2.0, 3.0]]))
        np.testing.assert_allclose(inv, [[0.375, -0.25], [-0.25, 0.5]], rtol=1e-14)

    def test_result_is_symmetric_and_involutive(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            dim = int(rng.integers(2, 24))
            b = rng.normal(size=(dim, dim))
            a = b.T @ b + np.eye(dim)
            if np.linalg.cond(a) > 1e6:
                continue
            inv = sym_inverse(a)
            np.testing.assert_array_equal(inv, inv.T)
            np.testing.assert_allclose(a @ inv, np.eye(dim), atol=1e-7)
            np.testing.assert_allclose(sym_inverse(inv), a,
                                       rtol=1e-6, atol=1e-6 * np.abs(a).max())

    def test_propagates_not_positive_definite(self):
        with pytest.raises(NotPositiveDefinite):
            sym_inverse(np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestJitterPolicy:
    def test_repairs_marginally_indefinite(self):
        # PSD with a zero eigenvalue: plain factorization fails, jitter succeeds.
        v = np.array([1.0, 1.0])
        a = np.outer(v, v)
        with pytest.raises(NotPositiveDefinite):
            cholesky(a)
        f = cholesky_with_jitter(a)
        assert f.dim == 2

    def test_gives_up_on_strongly_indefinite(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky_with_jitter(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_inverse_factor_matches_dense_inverse():
    rng = np.random.default_rng(5)
    b = rng.normal(size=(6, 6))
    a = b.T @ b + np.eye(6)
    f = cholesky(a)
    linv = inverse_factor(f)
    np.testing.assert_allclose(linv @ f.lower, np.eye(6), atol=1e-10)
