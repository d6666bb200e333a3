"""Laplace approximation: general Newton solver with selectable B-matrix."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, NamedTuple, Optional

import numpy as np
import scipy.linalg

from . import autodiff
from .autodiff import SweepCounter
from .errors import (
    ContractViolationError,
    NonConvergenceError,
    NotPositiveDefiniteError,
    NumericalDomainError,
    SingularMatrixError,
    StrategyUnsuitableError,
)
from .linalg import (
    BlockDiagonal,
    CholeskyFactor,
    LUFactors,
    MatrixSqrt,
    block_sqrt,
    chol_solve,
    cholesky,
    log_det_chol,
    log_det_lu,
    lu_decompose,
    lu_solve,
    symmetrize,
    tri_solve,
)

logger = logging.getLogger(__name__)


class BStrategy(str, Enum):
    """Which Woodbury form of B is factored."""
    B1 = "b1"  # I + W^{1/2} K W^{1/2}, Cholesky
    B2 = "b2"  # I + K^{1/2 T} W K^{1/2}, Cholesky
    B3 = "b3"  # I + K W, LU


@dataclass(frozen=True)
class NewtonSettings:
    """Stopping rule and linesearch knobs for one solve."""

    tolerance: float = 1e-8
    max_iterations: int = 100
    linesearch: bool = True
    max_halvings: int = 10
    theta0: Optional[np.ndarray] = None
    check_structure: bool = False

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ContractViolationError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ContractViolationError("max_iterations must be at least 1")
        if self.max_halvings < 0:
            raise ContractViolationError("max_halvings must be non-negative")


@dataclass(frozen=True)
class BFactorization:
    """Factored B plus the companion matrices the adjoint and posterior reuse."""

    strategy: BStrategy
    K: np.ndarray
    W: BlockDiagonal
    L: Optional[CholeskyFactor] = None  # B1, B2
    W_sqrt: Optional[MatrixSqrt] = None  # B1
    K_sqrt: Optional[CholeskyFactor] = None  # B2
    lu: Optional[LUFactors] = None  # B3

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def log_det(self) -> float:
        if self.strategy == BStrategy.B3:
            return log_det_lu(self.lu)
        return log_det_chol(self.L)

    def B(self) -> np.ndarray:
        """Dense B this factorization stands for."""
        eye = np.eye(self.n)
        if self.strategy == BStrategy.B1:
            S = self.W_sqrt
            return eye + S.apply_transpose(S.factor.right_multiply(self.K))
        if self.strategy == BStrategy.B2:
            Lk = self.K_sqrt.lower
            return eye + Lk.T @ self.W.left_multiply(Lk)
        return eye + self.W.right_multiply(self.K)

    def solve(self, rhs) -> np.ndarray:
        """B^{-1} rhs."""
        if self.strategy == BStrategy.B3:
            return lu_solve(self.lu, rhs)
        return chol_solve(self.L, rhs)


@dataclass(frozen=True)
class LaplaceFit:
    """Mode and approximate log marginal; the bundle the gradient and posterior read."""

    theta: np.ndarray
    a: np.ndarray
    W: BlockDiagonal
    grad_loglik: np.ndarray
    factorization: BFactorization
    log_marginal: float
    psi: float
    log_det_B: float
    iterations: int
    eta: np.ndarray
    psi_trace: List[float] = field(default_factory=list)
    halvings: List[int] = field(default_factory=list)

    @property
    def K(self) -> np.ndarray:
        return self.factorization.K

    @property
    def strategy(self) -> BStrategy:
        return self.factorization.strategy

    @property
    def n(self) -> int:
        return self.theta.size

    def self_consistency(self) -> float:
        """max |theta - K grad log pi| at the returned mode."""
        return float(np.max(np.abs(self.theta - self.K @ self.grad_loglik), initial=0.0))


class NewtonStep(NamedTuple):
    theta: np.ndarray
    a: np.ndarray
    factorization: BFactorization


class LinesearchResult(NamedTuple):
    a: np.ndarray
    theta: np.ndarray
    psi: float
    halvings: int
    exhausted: bool


# ==================== Building blocks ====================

def objective(theta, a, loglik: float) -> float:
    """Psi = -1/2 a^T theta + log pi(y | theta, eta)."""
    return float(-0.5 * np.dot(a, theta) + loglik)


def factorize(
    K: np.ndarray,
    W: BlockDiagonal,
    strategy: BStrategy,
    K_sqrt: Optional[CholeskyFactor] = None,
) -> BFactorization:
    """Factor the selected B-matrix; failures surface as StrategyUnsuitableError."""
    strategy = BStrategy(strategy)
    n = K.shape[0]
    eye = np.eye(n)
    try:
        if strategy == BStrategy.B1:
            S = block_sqrt(W)
            B = eye + S.apply_transpose(S.factor.right_multiply(K))
            return BFactorization(strategy, K, W, L=cholesky(symmetrize(B)), W_sqrt=S)
        if strategy == BStrategy.B2:
            if K_sqrt is None:
                K_sqrt = cholesky(K)
            Lk = K_sqrt.lower
            B = eye + Lk.T @ W.left_multiply(Lk)
            return BFactorization(strategy, K, W, L=cholesky(symmetrize(B)), K_sqrt=K_sqrt)
        B = eye + W.right_multiply(K)
        return BFactorization(strategy, K, W, lu=lu_decompose(B))
    except (NotPositiveDefiniteError, SingularMatrixError) as exc:
        raise StrategyUnsuitableError(strategy.value, str(exc)) from exc


def newton_step(
    theta,
    K: np.ndarray,
    W: BlockDiagonal,
    grad_loglik,
    strategy: BStrategy,
    K_sqrt: Optional[CholeskyFactor] = None,
) -> NewtonStep:
    """One regularized Newton step solved through the selected Woodbury form."""
    theta = np.asarray(theta, dtype=float)
    grad_loglik = np.asarray(grad_loglik, dtype=float)
    if K.shape != (theta.size, theta.size) or grad_loglik.size != theta.size or W.n != theta.size:
        raise ContractViolationError("newton_step: K, W, theta and gradient dimensions disagree")

    fac = factorize(K, W, strategy, K_sqrt)
    b = W.matvec(theta) + grad_loglik

    if fac.strategy == BStrategy.B1:
        S = fac.W_sqrt
        a = b - S.apply(chol_solve(fac.L, S.apply_transpose(K @ b)))
        theta_new = K @ a
    elif fac.strategy == BStrategy.B2:
        Lk = fac.K_sqrt.lower
        c = chol_solve(fac.L, Lk.T @ b)
        theta_new = Lk @ c
        a = tri_solve(Lk, c, lower=True, transpose=True)
    else:
        a = b - W.matvec(lu_solve(fac.lu, K @ b))
        theta_new = K @ a
    return NewtonStep(theta_new, a, fac)


def linesearch(
    a_new,
    a_old,
    theta_of: Callable[[np.ndarray], np.ndarray],
    objective_of: Callable[[np.ndarray, np.ndarray], float],
    psi_old: float,
    max_halvings: int = 10,
) -> LinesearchResult:
    """Halve the step by averaging a-vectors until Psi stops decreasing."""

    def evaluate(a):
        theta = theta_of(a)
        try:
            psi = objective_of(a, theta)
        except NumericalDomainError:
            psi = -np.inf
        return theta, (psi if np.isfinite(psi) else -np.inf)

    a = np.asarray(a_new, dtype=float)
    a_old = np.asarray(a_old, dtype=float)
    theta, psi = evaluate(a)
    if np.array_equal(a, a_old):
        return LinesearchResult(a, theta, psi, 0, True)

    halvings = 0
    while psi < psi_old:
        if halvings >= max_halvings:
            return LinesearchResult(a, theta, psi, halvings, True)
        a = 0.5 * (a + a_old)
        theta, psi = evaluate(a)
        halvings += 1
    return LinesearchResult(a, theta, psi, halvings, False)


# ==================== Solver ====================

def _negative_hessian(f, theta, m, counter, check) -> BlockDiagonal:
    H = autodiff.block_hessian(f, theta, m, counter=counter, check=check)
    blocks = -0.5 * (H.blocks + np.transpose(H.blocks, (0, 2, 1)))
    return BlockDiagonal(blocks)


def laplace_fit(
    K,
    likelihood,
    eta,
    settings: Optional[NewtonSettings] = None,
    strategy: BStrategy = BStrategy.B3,
    counter: Optional[SweepCounter] = None,
) -> LaplaceFit:
    """Mode of pi(theta | y, phi, eta) and the Laplace log marginal likelihood."""
    settings = settings or NewtonSettings()
    strategy = BStrategy(strategy)
    K = np.asarray(K, dtype=float)
    eta = np.asarray(eta, dtype=float).reshape(-1)
    n = likelihood.n
    m = likelihood.block_size
    if K.shape != (n, n):
        raise ContractViolationError(f"K has shape {K.shape}, likelihood expects ({n}, {n})")
    if eta.size != likelihood.eta_dim:
        raise ContractViolationError(f"eta has {eta.size} entries, likelihood expects {likelihood.eta_dim}")

    def loglik(theta):
        return likelihood.log_density(theta, eta)

    K_sqrt = None
    if strategy == BStrategy.B2:
        try:
            K_sqrt = cholesky(K)
        except NotPositiveDefiniteError as exc:
            raise StrategyUnsuitableError(strategy.value, f"K is not positive definite: {exc}") from exc

    if settings.theta0 is None:
        theta = np.zeros(n)
        a = np.zeros(n)
    else:
        theta = np.asarray(settings.theta0, dtype=float).reshape(n)
        a = scipy.linalg.solve(K, theta, assume_a="sym")

    psi_old = objective(theta, a, float(loglik(theta)))
    trace: List[float] = []
    halvings: List[int] = []

    def search(a_candidate) -> LinesearchResult:
        return linesearch(
            a_candidate,
            a,
            theta_of=lambda a_: K @ a_,
            objective_of=lambda a_, th: objective(th, a_, float(loglik(th))),
            psi_old=psi_old,
            max_halvings=settings.max_halvings,
        )

    for iteration in range(1, settings.max_iterations + 1):
        grad = autodiff.gradient(loglik, theta, counter)
        W = _negative_hessian(loglik, theta, m, counter, settings.check_structure)
        step = newton_step(theta, K, W, grad, strategy, K_sqrt)

        if settings.linesearch and iteration > 1:
            ls = search(step.a)
            if ls.psi < psi_old:
                # with W >= 0, (K^-1 + W) is positive definite and the step ascends
                clipped = W.clip_negative()
                if clipped is not W:
                    logger.debug("iteration %d: Newton direction rejected; retrying with clipped curvature", iteration)
                    ls = search(newton_step(theta, K, clipped, grad, strategy, K_sqrt).a)
            if ls.psi < psi_old:
                if psi_old - ls.psi >= settings.tolerance:
                    logger.warning(
                        "linesearch exhausted after %d halvings at iteration %d (psi %.12g vs %.12g)",
                        ls.halvings,
                        iteration,
                        ls.psi,
                        psi_old,
                    )
                    raise NonConvergenceError(
                        trace, f"linesearch exhausted at iteration {iteration} away from the mode (psi={psi_old!r})"
                    )
                # no representable improvement left: the previous iterate is the mode
                break
            theta_new, a_new, psi_new, n_halvings = ls.theta, ls.a, ls.psi, ls.halvings
        else:
            theta_new, a_new = step.theta, step.a
            psi_new = objective(theta_new, a_new, float(loglik(theta_new)))
            n_halvings = 0

        trace.append(psi_new)
        halvings.append(n_halvings)
        logger.debug("newton iteration %d: psi=%.12g halvings=%d", iteration, psi_new, n_halvings)

        converged = abs(psi_new - psi_old) < settings.tolerance
        theta, a, psi_old = theta_new, a_new, psi_new
        if converged:
            break
    else:
        raise NonConvergenceError(trace)

    # Re-evaluate curvature and factorization at the accepted mode.
    grad = autodiff.gradient(loglik, theta, counter)
    W = _negative_hessian(loglik, theta, m, counter, settings.check_structure)
    fac = factorize(K, W, strategy, K_sqrt)
    log_det = fac.log_det()
    psi = objective(theta, a, float(loglik(theta)))

    fit = LaplaceFit(
        theta=theta,
        a=a,
        W=W,
        grad_loglik=grad,
        factorization=fac,
        log_marginal=psi - 0.5 * log_det,
        psi=psi,
        log_det_B=log_det,
        iterations=len(trace),
        eta=eta,
        psi_trace=trace,
        halvings=halvings,
    )
    logger.debug(
        "laplace_fit: strategy=%s iterations=%d log_marginal=%.12g self-consistency=%.3e",
        strategy.value,
        fit.iterations,
        fit.log_marginal,
        fit.self_consistency(),
    )
    return fit
