"""Tests for block-diagonal algebra and the factorizations."""

import numpy as np
import pytest

from src.errors import ContractViolationError, NotPositiveDefiniteError, NumericalDomainError, SingularMatrixError
from src.linalg import (
    BlockDiagonal,
    block_sqrt,
    chol_solve,
    cholesky,
    log_det_chol,
    log_det_lu,
    lu_decompose,
    lu_solve,
    tri_solve,
)
from tests.conftest import random_block_spd, random_spd


class TestBlockDiagonal:
    """Operations on block-diagonal W."""

    def test_to_dense(self):
        """Blocks land on the diagonal."""
        W = BlockDiagonal(np.array([[[1.0, 2.0], [2.0, 5.0]], [[3.0, 0.0], [0.0, 4.0]]]))
        dense = W.to_dense()
        assert dense.shape == (4, 4)
        assert dense[0, 1] == 2.0
        assert dense[1, 2] == 0.0
        np.testing.assert_array_equal(W.diagonal(), [1.0, 5.0, 3.0, 4.0])

    def test_products_match_dense(self, rng):
        """matvec, left and right multiplication against dense algebra."""
        W = BlockDiagonal(rng.standard_normal((3, 2, 2)))
        M = rng.standard_normal((6, 6))
        v = rng.standard_normal(6)
        D = W.to_dense()
        np.testing.assert_allclose(W.matvec(v), D @ v)
        np.testing.assert_allclose(W.left_multiply(M), D @ M)
        np.testing.assert_allclose(W.right_multiply(M), M @ D)
        np.testing.assert_allclose(W.transpose().to_dense(), D.T)

    def test_from_diagonal(self):
        W = BlockDiagonal.from_diagonal([1.0, 2.0, 3.0])
        assert W.m == 1
        np.testing.assert_array_equal(W.to_dense(), np.diag([1.0, 2.0, 3.0]))

    def test_zeros(self):
        """Zero matrix reports itself as such."""
        assert BlockDiagonal.zeros(4, 2).is_zero()
        with pytest.raises(ContractViolationError):
            BlockDiagonal.zeros(5, 2)

    def test_bad_shape(self):
        with pytest.raises(ContractViolationError):
            BlockDiagonal(np.ones((2, 2, 3)))

    def test_clip_negative_keeps_psd(self, rng):
        """Semi-definite input is returned as is."""
        W = BlockDiagonal(random_block_spd(rng, 6, 2))
        assert W.clip_negative() is W

    def test_clip_negative_diagonal(self):
        W = BlockDiagonal.from_diagonal([2.0, -1.0, 0.0])
        np.testing.assert_allclose(W.clip_negative().to_dense(), np.diag([2.0, 0.0, 0.0]), atol=1e-15)

    def test_clip_negative_blocks(self):
        """[[0, 1], [1, 0]] has eigenvalues +-1; the positive part is [[.5, .5], [.5, .5]]."""
        W = BlockDiagonal(np.array([[[0.0, 1.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 3.0]]]))
        clipped = W.clip_negative()
        np.testing.assert_allclose(clipped.blocks[0], [[0.5, 0.5], [0.5, 0.5]], atol=1e-12)
        np.testing.assert_allclose(clipped.blocks[1], [[1.0, 0.0], [0.0, 3.0]], atol=1e-12)
        assert np.linalg.eigvalsh(clipped.to_dense()).min() >= -1e-12


class TestCholesky:
    """Cholesky factor and its failures."""

    def test_reconstructs(self, rng):
        A = random_spd(rng, 6)
        L = cholesky(A)
        np.testing.assert_allclose(L.lower @ L.lower.T, A, atol=1e-12)
        assert np.all(np.diag(L.lower) > 0)

    def test_log_det(self, rng):
        """log|A| agrees with slogdet."""
        A = random_spd(rng, 5)
        assert log_det_chol(cholesky(A)) == pytest.approx(np.linalg.slogdet(A)[1], rel=1e-12)

    def test_indefinite_reports_index(self):
        """The first failing pivot index is reported."""
        with pytest.raises(NotPositiveDefiniteError) as info:
            cholesky(np.diag([1.0, 2.0, -1.0, 4.0]))
        assert info.value.index == 2

    def test_rejects_asymmetric(self):
        with pytest.raises(ContractViolationError):
            cholesky(np.array([[2.0, 1.0], [0.0, 2.0]]))

    def test_rejects_non_finite(self):
        with pytest.raises(NumericalDomainError):
            cholesky(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    def test_solve(self, rng):
        A = random_spd(rng, 5)
        b = rng.standard_normal(5)
        np.testing.assert_allclose(A @ chol_solve(cholesky(A), b), b, atol=1e-10)


class TestLU:
    """Partial-pivoting LU."""

    def test_reconstructs(self, rng):
        """P A = L U."""
        A = rng.standard_normal((5, 5))
        F = lu_decompose(A)
        np.testing.assert_allclose(F.P @ A, F.L @ F.U, atol=1e-12)

    def test_log_det_positive(self, rng):
        """log|I + K W| against slogdet for SPD K and diagonal W >= 0."""
        K = random_spd(rng, 6)
        W = np.diag(rng.uniform(0.1, 2.0, 6))
        B = np.eye(6) + K @ W
        assert log_det_lu(lu_decompose(B)) == pytest.approx(np.linalg.slogdet(B)[1], rel=1e-10)

    def test_log_det_negative_determinant(self):
        with pytest.raises(NumericalDomainError):
            log_det_lu(lu_decompose(np.diag([1.0, -2.0])))

    def test_singular(self):
        """A zero column fails with the pivot index."""
        with pytest.raises(SingularMatrixError):
            lu_decompose(np.array([[1.0, 0.0], [2.0, 0.0]]))

    def test_solve(self, rng):
        A = rng.standard_normal((4, 4)) + 4 * np.eye(4)
        b = rng.standard_normal((4, 2))
        np.testing.assert_allclose(A @ lu_solve(lu_decompose(A), b), b, atol=1e-10)


class TestTriSolve:
    """Triangular solves on both sides."""

    def test_left_and_right(self, rng):
        L = np.tril(rng.standard_normal((4, 4))) + 3 * np.eye(4)
        B = rng.standard_normal((4, 4))
        np.testing.assert_allclose(L @ tri_solve(L, B), B, atol=1e-10)
        np.testing.assert_allclose(L.T @ tri_solve(L, B, transpose=True), B, atol=1e-10)
        np.testing.assert_allclose(tri_solve(L, B, side="right") @ L, B, atol=1e-10)
        np.testing.assert_allclose(tri_solve(L, B, transpose=True, side="right") @ L.T, B, atol=1e-10)

    def test_zero_diagonal(self):
        with pytest.raises(SingularMatrixError):
            tri_solve(np.array([[1.0, 0.0], [1.0, 0.0]]), np.ones(2))


class TestBlockSqrt:
    """Square roots of W."""

    def test_diagonal(self):
        S = block_sqrt(BlockDiagonal.from_diagonal([4.0, 9.0, 0.0]))
        np.testing.assert_allclose(S.to_dense(), np.diag([2.0, 3.0, 0.0]))

    def test_blocks(self, rng):
        """S S^T = W for SPD blocks."""
        W = BlockDiagonal(random_block_spd(rng, 6, 2))
        S = block_sqrt(W)
        dense = S.to_dense()
        np.testing.assert_allclose(dense @ dense.T, W.to_dense(), atol=1e-12)

    def test_semidefinite_block(self):
        """A rank-one block still has a root."""
        W = BlockDiagonal(np.array([[[1.0, 1.0], [1.0, 1.0]]]))
        dense = block_sqrt(W).to_dense()
        np.testing.assert_allclose(dense @ dense.T, W.to_dense(), atol=1e-12)

    def test_negative(self):
        with pytest.raises(NotPositiveDefiniteError):
            block_sqrt(BlockDiagonal.from_diagonal([1.0, -0.5]))

    def test_apply(self, rng):
        W = BlockDiagonal(random_block_spd(rng, 4, 2))
        S = block_sqrt(W)
        M = rng.standard_normal((4, 3))
        np.testing.assert_allclose(S.apply(M), S.to_dense() @ M)
        np.testing.assert_allclose(S.apply_transpose(M), S.to_dense().T @ M)


class TestWoodburyForms:
    """The three B-matrices share a determinant and give one Newton direction."""

    def test_random_pairs(self):
        """200 random (K, W) pairs, n in [2, 20], m in {1, 2}."""
        rng = np.random.default_rng(2024)
        for _ in range(200):
            m = int(rng.choice([1, 2]))
            n = m * int(rng.integers(max(1, 2 // m), 20 // m + 1))
            K = random_spd(rng, n, shift=0.1)
            W = BlockDiagonal(random_block_spd(rng, n, m))
            Wd = W.to_dense()
            Lk = np.linalg.cholesky(K)
            S = block_sqrt(W).to_dense()
            eye = np.eye(n)
            B1 = eye + S.T @ K @ S
            B2 = eye + Lk.T @ Wd @ Lk
            B3 = eye + K @ Wd
            ld1 = log_det_chol(cholesky(0.5 * (B1 + B1.T)))
            ld2 = log_det_chol(cholesky(0.5 * (B2 + B2.T)))
            ld3 = log_det_lu(lu_decompose(B3))
            assert ld1 == pytest.approx(ld2, rel=1e-9, abs=1e-9)
            assert ld1 == pytest.approx(ld3, rel=1e-9, abs=1e-9)

            b = rng.standard_normal(n)
            direct = np.linalg.solve(np.linalg.inv(K) + Wd, b)
            a1 = b - S @ np.linalg.solve(B1, S.T @ K @ b)
            a3 = b - Wd @ np.linalg.solve(B3, K @ b)
            c = np.linalg.solve(B2, Lk.T @ b)
            np.testing.assert_allclose(K @ a1, direct, atol=1e-8 * max(1.0, np.abs(direct).max()))
            np.testing.assert_allclose(K @ a3, direct, atol=1e-8 * max(1.0, np.abs(direct).max()))
            np.testing.assert_allclose(Lk @ c, direct, atol=1e-8 * max(1.0, np.abs(direct).max()))

    def test_r_identity(self):
        """(K + W^-1)^-1 = W - W A W with A = (I + K W)^-1 K."""
        rng = np.random.default_rng(7)
        for _ in range(50):
            m = int(rng.choice([1, 2]))
            n = m * int(rng.integers(1, 8))
            K = random_spd(rng, n, shift=0.5)
            Wd = BlockDiagonal(random_block_spd(rng, n, m)).to_dense()
            A = np.linalg.solve(np.eye(n) + K @ Wd, K)
            expected = np.linalg.inv(K + np.linalg.inv(Wd))
            scale = max(1.0, np.abs(expected).max())
            np.testing.assert_allclose(Wd - Wd @ A @ Wd, expected, atol=1e-8 * scale)
