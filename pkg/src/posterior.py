"""Gaussian draws of the latent variable from a converged Laplace fit."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .adjoint import compute_A, compute_R
from .errors import ConditioningError, ContractViolationError, NotPositiveDefiniteError
from .linalg import cholesky, lu_solve, symmetrize, tri_solve
from .newton import BStrategy, LaplaceFit

logger = logging.getLogger(__name__)

PSD_TOL = 1e-10
JITTER_SCALE = 1e-12
JITTER_STEPS = 8


@dataclass(frozen=True)
class PredictiveGaussian:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.size


def _check_psd(cov: np.ndarray) -> np.ndarray:
    cov = symmetrize(cov)
    if cov.size:
        lam = np.linalg.eigvalsh(cov)
        scale = max(1.0, float(np.max(np.abs(np.diag(cov)))))
        if lam[0] < -PSD_TOL * scale:
            raise ConditioningError(f"predictive covariance is indefinite (min eigenvalue {lam[0]:.3e})")
    return cov


def predictive(fit: LaplaceFit, K_star, K_star_star) -> PredictiveGaussian:
    """Mean K_* g and covariance K_** - K_* R K_*^T at new inputs."""
    K_star = np.asarray(K_star, dtype=float)
    K_star_star = np.asarray(K_star_star, dtype=float)
    n_star = K_star.shape[0]
    if K_star.ndim != 2 or K_star.shape[1] != fit.n or K_star_star.shape != (n_star, n_star):
        raise ContractViolationError(
            f"K_star must be (n*, {fit.n}) and K_star_star (n*, n*); got {K_star.shape} and {K_star_star.shape}"
        )
    mean = K_star @ fit.grad_loglik

    fac = fit.factorization
    if fac.strategy == BStrategy.B1:
        V = tri_solve(fac.L.lower, fac.W_sqrt.apply_transpose(K_star.T), lower=True)
        cov = K_star_star - V.T @ V
    elif fac.strategy == BStrategy.B2:
        cov = K_star_star - K_star @ compute_R(fit) @ K_star.T
    else:
        W = fac.W
        middle = W.to_dense() - W.left_multiply(W.right_multiply(lu_solve(fac.lu, fac.K)))
        cov = K_star_star - K_star @ middle @ K_star.T
    return PredictiveGaussian(mean, _check_psd(cov))


def conditional_latent(fit: LaplaceFit) -> PredictiveGaussian:
    """The approximating normal at the observed points: N(theta_hat, (K^-1 + W)^-1)."""
    return PredictiveGaussian(fit.theta.copy(), compute_A(fit))


def sample(g: PredictiveGaussian, rng: np.random.Generator, count: int) -> np.ndarray:
    """``count`` draws as rows; the factor gets a doubling jitter ladder if needed."""
    if count < 0:
        raise ContractViolationError("count must be non-negative")
    n = g.dim
    if n == 0:
        return np.zeros((count, 0))
    cov = symmetrize(g.cov)
    if not np.any(cov):
        return np.tile(g.mean, (count, 1))

    jitter = 0.0
    base = JITTER_SCALE * max(float(np.trace(cov)) / n, np.finfo(float).tiny)
    for step in range(JITTER_STEPS + 1):
        try:
            L = cholesky(cov + jitter * np.eye(n)).lower
            break
        except NotPositiveDefiniteError:
            jitter = base * 2.0**step
            logger.warning("covariance factor failed; retrying with jitter %.3e", jitter)
    else:
        raise ConditioningError(f"covariance could not be factored with jitter up to {jitter:.3e}")

    z = rng.standard_normal((count, n))
    return g.mean + z @ L.T
