"""Hamiltonian Monte Carlo over hyperparameters (marginal) or everything (full)."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, List, Optional, Tuple

import numpy as np

from . import autodiff
from .adjoint import marginal_gradient
from .errors import ContractViolationError, LaplaceError
from .models import LatentGaussianModel
from .newton import BStrategy, NewtonSettings, laplace_fit
from .posterior import conditional_latent, sample

logger = logging.getLogger(__name__)

DIVERGENCE_ENERGY = 1000.0
DIVERGENCE_WARN_RATE = 0.2


@dataclass(frozen=True)
class HmcSettings:
    step_size: float = 0.1
    leapfrog_steps: int = 10
    iterations: int = 1000
    warmup: int = 500
    target_accept: float = 0.8
    chains: int = 4
    seed: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ContractViolationError("step_size must be positive")
        if self.leapfrog_steps < 1:
            raise ContractViolationError("leapfrog_steps must be at least 1")
        if self.iterations < 1 or self.warmup < 0 or self.chains < 1:
            raise ContractViolationError("iterations and chains must be positive, warmup non-negative")
        if not 0 < self.target_accept < 1:
            raise ContractViolationError("target_accept must lie in (0, 1)")


# ==================== Targets ====================

class MarginalTarget:
    """log pi_G(y | phi, eta) + hyperprior in log coordinates; one Laplace solve per evaluation."""

    def __init__(self, model: LatentGaussianModel, strategy: BStrategy = BStrategy.B3, newton: Optional[NewtonSettings] = None):
        self.model = model
        self.strategy = BStrategy(strategy)
        self.newton = newton or NewtonSettings()
        self._theta0: Optional[np.ndarray] = None
        self.solves = 0

    @property
    def dim(self) -> int:
        return self.model.p + self.model.T

    def evaluate(self, u) -> Tuple[float, np.ndarray, Any]:
        model = self.model
        phi, eta = model.split(u)
        K = np.asarray(model.covariance.matrix(phi), dtype=float)
        settings = NewtonSettings(
            tolerance=self.newton.tolerance,
            max_iterations=self.newton.max_iterations,
            linesearch=self.newton.linesearch,
            max_halvings=self.newton.max_halvings,
            theta0=self._theta0,
        )
        fit = laplace_fit(K, model.likelihood, eta, settings, self.strategy)
        self.solves += 1
        self._theta0 = fit.theta
        grad = marginal_gradient(fit, model.covariance, phi, model.likelihood, eta)
        lp = fit.log_marginal + float(model.log_prior(u))
        g = grad.as_vector() * model.model_scale_derivative(u) + autodiff.gradient(model.log_prior, u)
        return lp, g, fit

    def latent(self, extra, rng: np.random.Generator) -> np.ndarray:
        return sample(conditional_latent(extra), rng, 1)[0]


class FullTarget:
    """Joint density over (log hyperparameters, theta); diagonal covariances only."""

    def __init__(self, model: LatentGaussianModel):
        if model.covariance.structure != "diagonal":
            raise ContractViolationError(f"full HMC is not supported for the '{model.kind}' model")
        self.model = model
        self.solves = 0

    @property
    def dim(self) -> int:
        return self.model.p + self.model.T + self.model.covariance.n

    def evaluate(self, z) -> Tuple[float, np.ndarray, Any]:
        z = np.asarray(z, dtype=float)
        lp = float(self.model.log_joint(z))
        return lp, autodiff.gradient(self.model.log_joint, z), None

    def latent(self, extra, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(0)


# ==================== Sampler ====================

@dataclass
class DualAveraging:
    """Step-size adaptation toward a target acceptance rate."""

    mu: float
    target: float = 0.8
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    h_bar: float = 0.0
    log_eps_bar: float = 0.0
    t: int = 0

    def update(self, accept_prob: float) -> float:
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob)
        log_eps = self.mu - np.sqrt(self.t) / self.gamma * self.h_bar
        eta = self.t ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar
        return float(np.exp(log_eps))

    @property
    def final_step_size(self) -> float:
        return float(np.exp(self.log_eps_bar))


@dataclass
class ChainResult:
    chain: int
    draws: np.ndarray  # (iterations, dim) in sampler coordinates
    latent: np.ndarray  # (iterations, n) or (iterations, 0)
    accept_rate: float
    divergences: int
    step_size: float
    gradient_evals: int
    solves: int
    elapsed: float
    accept_probs: List[float] = field(default_factory=list)


def _transition(target, q, lp, grad, extra, eps: float, L: int, rng: np.random.Generator):
    p0 = rng.standard_normal(q.size)
    h0 = -lp + 0.5 * float(p0 @ p0)
    q_new, p = q.copy(), p0.copy()
    evals = 0
    try:
        g = grad
        p = p + 0.5 * eps * g
        for step in range(L):
            q_new = q_new + eps * p
            lp_new, g, extra_new = target.evaluate(q_new)
            evals += 1
            if step < L - 1:
                p = p + eps * g
        p = p + 0.5 * eps * g
    except LaplaceError as exc:
        logger.debug("trajectory aborted: %s", exc)
        return q, lp, grad, extra, 0.0, True, evals

    h1 = -lp_new + 0.5 * float(p @ p)
    if not np.isfinite(h1) or h1 - h0 > DIVERGENCE_ENERGY:
        return q, lp, grad, extra, 0.0, True, evals
    accept_prob = float(min(1.0, np.exp(h0 - h1)))
    if rng.random() < accept_prob:
        return q_new, lp_new, g, extra_new, accept_prob, False, evals
    return q, lp, grad, extra, accept_prob, False, evals


def run_chain(target, q0, settings: HmcSettings, chain: int = 0) -> ChainResult:
    """Warmup with dual averaging, then ``settings.iterations`` kept draws."""
    rng = np.random.default_rng(settings.seed + chain)
    started = time.perf_counter()
    solves_before = target.solves
    q = np.asarray(q0, dtype=float).copy()
    lp, grad, extra = target.evaluate(q)
    evals = 1

    eps = settings.step_size
    adapt = DualAveraging(mu=float(np.log(10.0 * eps)), target=settings.target_accept)
    for _ in range(settings.warmup):
        q, lp, grad, extra, alpha, _, k = _transition(target, q, lp, grad, extra, eps, settings.leapfrog_steps, rng)
        evals += k
        eps = adapt.update(alpha)
    if settings.warmup:
        eps = adapt.final_step_size

    draws = np.zeros((settings.iterations, q.size))
    latent: List[np.ndarray] = []
    probs: List[float] = []
    divergences = 0
    accepted = 0
    for i in range(settings.iterations):
        q_prev = q
        q, lp, grad, extra, alpha, divergent, k = _transition(target, q, lp, grad, extra, eps, settings.leapfrog_steps, rng)
        evals += k
        divergences += int(divergent)
        accepted += int(q is not q_prev)
        probs.append(alpha)
        draws[i] = q
        latent.append(target.latent(extra, rng))

    elapsed = time.perf_counter() - started
    result = ChainResult(
        chain=chain,
        draws=draws,
        latent=np.vstack(latent) if latent else np.zeros((0, 0)),
        accept_rate=accepted / settings.iterations,
        divergences=divergences,
        step_size=eps,
        gradient_evals=evals,
        solves=target.solves - solves_before,
        elapsed=elapsed,
        accept_probs=probs,
    )
    logger.info(
        "chain %d: step size %.4g, acceptance %.3f, %d divergences, %.2fs",
        chain,
        eps,
        result.accept_rate,
        divergences,
        elapsed,
    )
    if divergences > DIVERGENCE_WARN_RATE * settings.iterations:
        logger.warning("chain %d: %d of %d transitions diverged", chain, divergences, settings.iterations)
    return result


def _run_one(args) -> ChainResult:
    target, q0, settings, chain = args
    return run_chain(target, q0, settings, chain)


def run_chains(target, q0, settings: HmcSettings, workers: int = 0) -> List[ChainResult]:
    """Chains in a process pool; chain c uses RNG seed ``settings.seed + c``."""
    jobs = [(target, q0, settings, c) for c in range(settings.chains)]
    if workers == 1 or settings.chains == 1:
        return [_run_one(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers or settings.chains) as pool:
        return list(pool.map(_run_one, jobs))


# ==================== Diagnostics ====================

def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.size
    size = 1 << int(np.ceil(np.log2(2 * n)))
    centered = x - x.mean()
    f = np.fft.rfft(centered, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    return acov / n


def effective_sample_size(x) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence; ``x`` is (chains, draws)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    M, N = x.shape
    if N < 4:
        return float(M * N)
    acov = np.stack([_autocovariance(c) for c in x])
    chain_var = acov[:, 0] * N / (N - 1.0)
    W = chain_var.mean()
    B_over_N = x.mean(axis=1).var(ddof=1) if M > 1 else 0.0
    var_plus = W * (N - 1.0) / N + B_over_N
    if var_plus <= 0:
        return float(M * N)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0

    pairs = []
    for k in range(0, N - 1, 2):
        s = rho[k] + rho[k + 1]
        if s < 0:
            break
        pairs.append(s)
    pairs = np.minimum.accumulate(np.asarray(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * float(np.sum(pairs))
    return float(M * N / max(tau, 1.0 / np.log10(M * N + 10.0)))


def mcse(x) -> float:
    """Monte Carlo standard error of the mean."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return float(np.std(x, ddof=1) / np.sqrt(effective_sample_size(x)))
