"""Dense and block-structured factorizations behind every B-matrix."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import ContractViolationError, NotPositiveDefiniteError, NumericalDomainError, SingularMatrixError

logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-14
SYMMETRY_TOL = 1e-12
NEGATIVE_EIGEN_TOL = 1e-12


# ==================== Types ====================

@dataclass(frozen=True)
class BlockDiagonal:
    """n x n matrix made of n/m dense m x m blocks on the diagonal."""

    blocks: np.ndarray  # (n/m, m, m)

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=float)
        if b.ndim != 3 or b.shape[1] != b.shape[2]:
            raise ContractViolationError(f"blocks must have shape (n/m, m, m), got {b.shape}")
        object.__setattr__(self, "blocks", b)

    @classmethod
    def from_diagonal(cls, d) -> "BlockDiagonal":
        d = np.asarray(d, dtype=float).reshape(-1)
        return cls(d.reshape(-1, 1, 1))

    @classmethod
    def zeros(cls, n: int, m: int = 1) -> "BlockDiagonal":
        if n % m:
            raise ContractViolationError(f"dimension {n} is not divisible by block size {m}")
        return cls(np.zeros((n // m, m, m)))

    @property
    def m(self) -> int:
        return self.blocks.shape[1]

    @property
    def n(self) -> int:
        return self.blocks.shape[0] * self.blocks.shape[1]

    @property
    def shape(self):
        return (self.n, self.n)

    def to_dense(self) -> np.ndarray:
        if self.blocks.shape[0] == 0:
            return np.zeros((0, 0))
        return scipy.linalg.block_diag(*self.blocks)

    def diagonal(self) -> np.ndarray:
        return np.einsum("bii->bi", self.blocks).reshape(-1)

    def transpose(self) -> "BlockDiagonal":
        return BlockDiagonal(np.transpose(self.blocks, (0, 2, 1)))

    def matvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return np.einsum("bij,bj->bi", self.blocks, v.reshape(-1, self.m)).reshape(-1)

    def left_multiply(self, M) -> np.ndarray:
        """self @ M for a dense n x k matrix M."""
        M = np.asarray(M, dtype=float)
        if M.ndim == 1:
            return self.matvec(M)
        k = M.shape[1]
        out = np.einsum("bij,bjk->bik", self.blocks, M.reshape(-1, self.m, k))
        return out.reshape(self.n, k)

    def right_multiply(self, M) -> np.ndarray:
        """M @ self for a dense k x n matrix M."""
        M = np.asarray(M, dtype=float)
        k = M.shape[0]
        out = np.einsum("kbi,bij->kbj", M.reshape(k, -1, self.m), self.blocks)
        return out.reshape(k, self.n)

    def clip_negative(self) -> "BlockDiagonal":
        """Nearest positive semi-definite block matrix; ``self`` when no eigenvalue is negative."""
        if self.blocks.shape[0] == 0:
            return self
        sym = 0.5 * (self.blocks + np.transpose(self.blocks, (0, 2, 1)))
        lam, V = np.linalg.eigh(sym)
        if lam.min() >= 0.0:
            return self
        return BlockDiagonal(np.einsum("bij,bj,bkj->bik", V, np.clip(lam, 0.0, None), V))

    def scale(self, c: float) -> "BlockDiagonal":
        return BlockDiagonal(self.blocks * c)

    def is_zero(self) -> bool:
        return not np.any(self.blocks)


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular L with positive diagonal, L L^T = A."""

    lower: np.ndarray

    @property
    def n(self) -> int:
        return self.lower.shape[0]


@dataclass(frozen=True)
class LUFactors:
    """Partial-pivoting LU in LAPACK packed form; P A = L U."""

    lu: np.ndarray
    piv: np.ndarray

    @property
    def n(self) -> int:
        return self.lu.shape[0]

    @property
    def L(self) -> np.ndarray:
        return np.tril(self.lu, -1) + np.eye(self.n)

    @property
    def U(self) -> np.ndarray:
        return np.triu(self.lu)

    @property
    def perm(self) -> np.ndarray:
        perm = np.arange(self.n)
        for i, p in enumerate(self.piv):
            perm[i], perm[p] = perm[p], perm[i]
        return perm

    @property
    def P(self) -> np.ndarray:
        return np.eye(self.n)[self.perm]

    @property
    def permutation_sign(self) -> int:
        swaps = int(np.sum(self.piv != np.arange(self.n)))
        return -1 if swaps % 2 else 1


@dataclass(frozen=True)
class MatrixSqrt:
    """Block factor S with S S^T equal to the factored matrix."""

    factor: BlockDiagonal

    def to_dense(self) -> np.ndarray:
        return self.factor.to_dense()

    def apply(self, M) -> np.ndarray:
        """S @ M."""
        return self.factor.left_multiply(M)

    def apply_transpose(self, M) -> np.ndarray:
        """S^T @ M."""
        return self.factor.transpose().left_multiply(M)


# ==================== Operations ====================

def _square(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractViolationError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NumericalDomainError("matrix", "matrix has non-finite entries")
    return A


def symmetrize(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + A.T)


def cholesky(A) -> CholeskyFactor:
    """Cholesky factor of a symmetric positive-definite matrix."""
    A = _square(A)
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if np.max(np.abs(A - A.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise ContractViolationError("cholesky requires a symmetric matrix")
    c, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ContractViolationError(f"dpotrf rejected argument {-info}")
    L = np.tril(c)
    pivots = np.diag(L) ** 2
    threshold = PIVOT_TOL * max(float(np.max(np.diag(A), initial=0.0)), 0.0)
    bad = np.flatnonzero(pivots <= threshold)
    if bad.size:
        raise NotPositiveDefiniteError(int(bad[0]))
    return CholeskyFactor(L)


def lu_decompose(A) -> LUFactors:
    """LU decomposition with partial pivoting."""
    A = _square(A)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A)
    norm = float(np.max(np.sum(np.abs(A), axis=1), initial=0.0))
    u = np.abs(np.diag(lu))
    bad = np.flatnonzero(u <= PIVOT_TOL * norm) if norm > 0 else np.arange(A.shape[0])
    if bad.size:
        raise SingularMatrixError(int(bad[0]))
    return LUFactors(lu, piv)


def block_sqrt(W: BlockDiagonal) -> MatrixSqrt:
    """Blockwise square root; element-wise root when m = 1."""
    blocks = W.blocks
    if W.m == 1:
        d = blocks[:, 0, 0]
        bad = np.flatnonzero(d < -NEGATIVE_EIGEN_TOL)
        if bad.size:
            raise NotPositiveDefiniteError(int(bad[0]), f"W block {int(bad[0])} is negative")
        return MatrixSqrt(BlockDiagonal.from_diagonal(np.sqrt(np.clip(d, 0.0, None))))

    out = np.zeros_like(blocks)
    for b, block in enumerate(blocks):
        block = symmetrize(block)
        c, info = lapack.dpotrf(block, lower=1, clean=1)
        if info == 0 and np.all(np.diag(c) > 0):
            out[b] = np.tril(c)
            continue
        # semi-definite block: symmetric root from the eigendecomposition
        lam, V = np.linalg.eigh(block)
        if lam[0] < -NEGATIVE_EIGEN_TOL:
            raise NotPositiveDefiniteError(b, f"W block {b} has eigenvalue {lam[0]:.3e}")
        out[b] = V * np.sqrt(np.clip(lam, 0.0, None))
    return MatrixSqrt(BlockDiagonal(out))


def log_det_chol(L: CholeskyFactor) -> float:
    return float(2.0 * np.sum(np.log(np.diag(L.lower))))


def log_det_lu(F: LUFactors) -> float:
    """log|B| from LU factors; the determinant must be positive."""
    u = np.diag(F.lu)
    sign = F.permutation_sign * int(np.prod(np.sign(u)))
    if sign <= 0:
        raise NumericalDomainError("log_det_lu", "factored matrix has a non-positive determinant")
    return float(np.sum(np.log(np.abs(u))))


def tri_solve(
    T,
    B,
    lower: bool = True,
    transpose: bool = False,
    side: Literal["left", "right"] = "left",
) -> np.ndarray:
    """Solve op(T) X = B (side='left') or X op(T) = B (side='right')."""
    T = np.asarray(T, dtype=float)
    B = np.asarray(B, dtype=float)
    zero = np.flatnonzero(np.diag(T) == 0.0)
    if zero.size:
        raise SingularMatrixError(int(zero[0]))
    if side == "right":
        return scipy.linalg.solve_triangular(T, B.T, lower=lower, trans=0 if transpose else 1).T
    return scipy.linalg.solve_triangular(T, B, lower=lower, trans=1 if transpose else 0)


def chol_solve(L: CholeskyFactor, B) -> np.ndarray:
    """A^{-1} B from A = L L^T."""
    return scipy.linalg.cho_solve((L.lower, True), np.asarray(B, dtype=float))


def lu_solve(F: LUFactors, B) -> np.ndarray:
    return scipy.linalg.lu_solve((F.lu, F.piv), np.asarray(B, dtype=float))
