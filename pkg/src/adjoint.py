"""Gradient of the Laplace log marginal with respect to phi and eta.

The final Newton factorization is reused: R = (K + W^-1)^-1 and
A = (K^-1 + W)^-1 come from the saved B-matrix factors, the log-determinant
term is differentiated with m paired forward sweeps and one reverse sweep of
the likelihood, and the kernel is only ever swept in reverse with cotangent
Omega, so dK/dphi is never formed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from . import autodiff
from .autodiff import Sweep, SweepCounter, SweepMode, SweepPlan, VariableBlock
from .errors import ContractViolationError
from .linalg import BlockDiagonal, chol_solve, lu_solve, symmetrize, tri_solve
from .newton import BStrategy, LaplaceFit

logger = logging.getLogger(__name__)

AMatrix = Union[np.ndarray, BlockDiagonal]


@dataclass(frozen=True)
class MarginalGradient:
    """Gradient record; intermediates are only kept on request."""

    grad_phi: np.ndarray
    grad_eta: np.ndarray
    log_marginal: float
    s2: Optional[np.ndarray] = None
    s2p: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    omega: Optional[np.ndarray] = None

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.grad_phi, self.grad_eta])


def _joint(likelihood, n: int):
    def f(z):
        return likelihood.log_density(z[:n], z[n:])

    return f


def _diagonal_blocks(A: AMatrix, m: int) -> np.ndarray:
    if isinstance(A, BlockDiagonal):
        if A.m != m:
            raise ContractViolationError(f"A has {A.m}x{A.m} blocks, likelihood declares {m}")
        return A.blocks
    n = A.shape[0]
    if n % m:
        raise ContractViolationError(f"dimension {n} is not divisible by block size {m}")
    return np.stack([A[i : i + m, i : i + m] for i in range(0, n, m)]) if n else np.zeros((0, m, m))


# ==================== R and A ====================

def compute_R(fit: LaplaceFit) -> np.ndarray:
    """R = (K + W^-1)^-1 from the saved factorization."""
    fac = fit.factorization
    W = fac.W
    if fac.strategy == BStrategy.B1:
        S = fac.W_sqrt
        R = S.apply(chol_solve(fac.L, S.factor.transpose().to_dense()))
    elif fac.strategy == BStrategy.B2:
        # D = L^-1 K^{1/2 T} W
        D = tri_solve(fac.L.lower, W.right_multiply(fac.K_sqrt.lower.T), lower=True)
        R = W.to_dense() - D.T @ D
    else:
        R = W.to_dense() - W.left_multiply(W.right_multiply(lu_solve(fac.lu, fac.K)))
    return symmetrize(R)


def compute_A(fit: LaplaceFit, blocks_only: bool = False) -> AMatrix:
    """A = (K^-1 + W)^-1; ``blocks_only`` keeps just its m x m diagonal blocks."""
    fac = fit.factorization
    K = fac.K
    m = fac.W.m
    if fac.strategy == BStrategy.B1:
        D = tri_solve(fac.L.lower, fac.W_sqrt.apply_transpose(K), lower=True)
        if blocks_only:
            return BlockDiagonal(
                np.stack([K[i : i + m, i : i + m] - D[:, i : i + m].T @ D[:, i : i + m] for i in range(0, fac.n, m)])
            )
        return symmetrize(K - D.T @ D)
    if fac.strategy == BStrategy.B2:
        C = tri_solve(fac.L.lower, fac.K_sqrt.lower.T, lower=True)
        if blocks_only:
            return BlockDiagonal(np.stack([C[:, i : i + m].T @ C[:, i : i + m] for i in range(0, fac.n, m)]))
        return symmetrize(C.T @ C)
    A = symmetrize(lu_solve(fac.lu, K))
    return BlockDiagonal(_diagonal_blocks(A, m)) if blocks_only else A


# ==================== Log-determinant term ====================

def logdet_gradient(
    likelihood,
    theta,
    eta,
    A: AMatrix,
    m: Optional[int] = None,
    counter: Optional[SweepCounter] = None,
    method: str = "general",
) -> Tuple[np.ndarray, np.ndarray]:
    """(s2, s2p): gradient of 1/2 trace(A d2/dtheta2 log pi) in theta and eta.

    ``general`` pairs the strided tangents v_j with the j-th columns of the
    diagonal blocks of A (padded with zeros over eta) and differentiates
    their sum with one reverse sweep. ``diagonal`` is the m = 1 shortcut
    1/2 diag(A) * third derivative diagonal.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    eta = np.asarray(eta, dtype=float).reshape(-1)
    n, T = theta.size, eta.size
    m = m or likelihood.block_size
    blocks = _diagonal_blocks(A, m)
    if blocks.shape[0] * m != n:
        raise ContractViolationError(f"A covers {blocks.shape[0] * m} latent entries, theta has {n}")
    f = _joint(likelihood, n)
    joint = np.concatenate([theta, eta])

    if method == "diagonal":
        if m != 1:
            raise ContractViolationError("diagonal log-det gradient requires block size 1")
        diag_A = blocks[:, 0, 0]
        third = autodiff.third_order_diag(lambda th: likelihood.log_density(th, eta), theta, counter)
        s2 = 0.5 * diag_A * third
        if T == 0:
            return s2, np.zeros(0)
        plan = SweepPlan(
            (
                Sweep(SweepMode.FORWARD, np.ones(n), VariableBlock.THETA),
                Sweep(SweepMode.FORWARD, diag_A, VariableBlock.THETA),
                Sweep(SweepMode.REVERSE, 1.0, VariableBlock.ETA),
            ),
            split=n,
        )
        return s2, 0.5 * autodiff.run_plan(f, joint, plan, counter)

    if method != "general":
        raise ContractViolationError(f"unknown log-det gradient method '{method}'")

    pad = np.zeros(T)
    pairs = []
    for j, v in enumerate(autodiff.strided_tangents(n, m)):
        w = blocks[:, :, j].reshape(-1)
        pairs.append((np.concatenate([v, pad]), np.concatenate([w, pad])))
    s = 0.5 * autodiff.second_order_adjoint(f, joint, pairs, counter)
    return s[:n], s[n:]


# ==================== Omega and the two gradients ====================

def omega(fit: LaplaceFit, R: np.ndarray, s2) -> np.ndarray:
    """Cotangent for the reverse sweep over phi -> K.

    Omega = 1/2 a a^T - 1/2 R + (s2 - R K s2) g^T with g the likelihood
    gradient at the mode.
    """
    a = fit.a
    s2 = np.asarray(s2, dtype=float)
    t = s2 - R @ (fit.K @ s2)
    return 0.5 * np.outer(a, a) - 0.5 * R + np.outer(t, fit.grad_loglik)


def grad_phi(covariance, phi, Omega, counter: Optional[SweepCounter] = None) -> np.ndarray:
    """One reverse sweep of phi -> K(phi) seeded with Omega."""
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if phi.size == 0:
        return np.zeros(0)
    Omega = np.asarray(Omega, dtype=float)
    if Omega.shape != (covariance.n, covariance.n):
        raise ContractViolationError(f"Omega has shape {Omega.shape}, K is {covariance.n}x{covariance.n}")
    return autodiff.rev_sweep(covariance.matrix, phi, Omega, counter)


def grad_eta(
    likelihood,
    fit: LaplaceFit,
    R: np.ndarray,
    s2,
    s2p,
    counter: Optional[SweepCounter] = None,
) -> np.ndarray:
    """Explicit eta derivative + trace term + dot-product term through u = K (I - R K) s2."""
    eta = fit.eta
    T = eta.size
    if T == 0:
        return np.zeros(0)
    n = fit.n
    f = _joint(likelihood, n)
    joint = np.concatenate([fit.theta, eta])
    K = fit.K
    s2 = np.asarray(s2, dtype=float)
    u = K @ (s2 - R @ (K @ s2))

    explicit = autodiff.run_plan(
        f, joint, SweepPlan((Sweep(SweepMode.REVERSE, 1.0, VariableBlock.ETA),), split=n), counter
    )
    dot = autodiff.run_plan(
        f,
        joint,
        SweepPlan(
            (Sweep(SweepMode.FORWARD, u, VariableBlock.THETA), Sweep(SweepMode.REVERSE, 1.0, VariableBlock.ETA)),
            split=n,
        ),
        counter,
    )
    return explicit + np.asarray(s2p, dtype=float) + dot


def marginal_gradient(
    fit: LaplaceFit,
    covariance,
    phi,
    likelihood,
    eta=None,
    method: str = "general",
    blocks_only: bool = False,
    keep_intermediates: bool = False,
    counter: Optional[SweepCounter] = None,
) -> MarginalGradient:
    """Gradient of log pi_G(y | phi, eta) with respect to phi and eta."""
    phi = np.asarray(phi, dtype=float).reshape(-1)
    eta = fit.eta if eta is None else np.asarray(eta, dtype=float).reshape(-1)
    if eta.size != fit.eta.size or not np.array_equal(eta, fit.eta):
        raise ContractViolationError("eta does not match the eta the Laplace fit was computed at")
    p, T = phi.size, eta.size
    if p == 0 and T == 0:
        return MarginalGradient(np.zeros(0), np.zeros(0), fit.log_marginal)

    A = compute_A(fit, blocks_only=blocks_only)
    s2, s2p = logdet_gradient(likelihood, fit.theta, eta, A, likelihood.block_size, counter, method)
    R = compute_R(fit)

    Omega = omega(fit, R, s2) if p else None
    g_phi = grad_phi(covariance, phi, Omega, counter) if p else np.zeros(0)
    g_eta = grad_eta(likelihood, fit, R, s2, s2p, counter)

    if counter is not None:
        logger.debug("marginal_gradient: %d forward / %d reverse sweeps", counter.forward, counter.reverse)

    if not keep_intermediates:
        return MarginalGradient(g_phi, g_eta, fit.log_marginal)
    K = fit.K
    u = K @ (s2 - R @ (K @ s2))
    return MarginalGradient(g_phi, g_eta, fit.log_marginal, s2=s2, s2p=s2p, u=u, omega=Omega)
