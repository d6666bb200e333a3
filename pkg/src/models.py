"""Model zoo: likelihoods, covariance functions, hyperpriors and data handling.

Every ``log_density`` / ``matrix`` is written with the elementwise operations
of :mod:`src.autodiff`, so the same code runs on floats and on scalar towers
of any depth.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import value_of
from .errors import ContractViolationError, DataLoadError, ValidationError
from .linalg import cholesky

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
PK_TIMES = (0.083, 0.167, 0.25, 1.0, 2.0, 4.0)
DEGENERATE_RATE_TOL = 1e-8


# ==================== Likelihoods ====================

class LikelihoodModel(ABC):
    """log pi(y | theta, eta) with a declared m x m block-diagonal Hessian in theta."""

    name: str = "likelihood"
    block_size: int = 1
    eta_names: Tuple[str, ...] = ()

    @property
    @abstractmethod
    def n(self) -> int:
        """Latent dimension."""

    @property
    def eta_dim(self) -> int:
        return len(self.eta_names)

    @abstractmethod
    def log_density(self, theta, eta):
        """Scalar log density; generic over towers."""


class GaussianLikelihood(LikelihoodModel):
    """y_i ~ Normal(theta_i, sigma); eta = (sigma,)."""

    name = "gaussian"
    eta_names = ("sigma",)

    def __init__(self, y):
        self.y = np.asarray(y, dtype=float).reshape(-1)

    @property
    def n(self) -> int:
        return self.y.size

    def log_density(self, theta, eta):
        sigma = eta[0]
        r = self.y - theta
        return ad.tsum(-0.5 * r * r) / (sigma * sigma) - self.n * ad.log(sigma) - 0.5 * self.n * LOG_2PI


class PoissonLogLikelihood(LikelihoodModel):
    """y_i ~ Poisson(exp(theta_i))."""

    name = "poisson"

    def __init__(self, y):
        y = np.asarray(y, dtype=float).reshape(-1)
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValidationError("Poisson counts must be non-negative integers")
        self.y = y
        self._log_fact = float(np.sum(gammaln(y + 1.0)))

    @property
    def n(self) -> int:
        return self.y.size

    def log_density(self, theta, eta):
        return ad.tsum(self.y * theta - ad.exp(theta)) - self._log_fact


class StudentTLikelihood(LikelihoodModel):
    """Location Student-t with fixed nu; eta = (log sigma,). Not log-concave."""

    name = "student_t"
    eta_names = ("log_sigma",)

    def __init__(self, y, nu: float):
        if not nu > 0:
            raise ValidationError(f"degrees of freedom must be positive, got {nu}")
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.nu = float(nu)
        self._const = float(gammaln(0.5 * (nu + 1.0)) - gammaln(0.5 * nu) - 0.5 * np.log(nu * np.pi))

    @property
    def n(self) -> int:
        return self.y.size

    def log_density(self, theta, eta):
        log_sigma = eta[0]
        r = self.y - theta
        z = r * r * ad.exp(-2.0 * log_sigma) / self.nu
        return self.n * (self._const - log_sigma) - 0.5 * (self.nu + 1.0) * ad.tsum(ad.log1p(z))


class BernoulliLogitLikelihood(LikelihoodModel):
    """y_i ~ Bernoulli(expit(theta_i)), y in {0, 1}."""

    name = "bernoulli"

    def __init__(self, y):
        y = np.asarray(y, dtype=float).reshape(-1)
        if not np.all((y == 0) | (y == 1)):
            raise ValidationError("Bernoulli outcomes must be 0 or 1")
        self.y = y

    @property
    def n(self) -> int:
        return self.y.size

    def log_density(self, theta, eta):
        return ad.tsum(self.y * theta - ad.softplus(theta))


def gaussian_gp(y, X=None) -> GaussianLikelihood:
    return GaussianLikelihood(y)


def poisson_log_gp(y, X=None) -> PoissonLogLikelihood:
    return PoissonLogLikelihood(y)


def student_t_gp(y, nu: float, X=None) -> StudentTLikelihood:
    return StudentTLikelihood(y, nu)


def bernoulli_logit_gp(y, X=None) -> BernoulliLogitLikelihood:
    return BernoulliLogitLikelihood(y)


# ==================== Pharmacokinetics ====================

@dataclass(frozen=True)
class PKParams:
    """One-compartment model with first-order absorption."""

    k1: float
    k2: float
    m0_gut: float = 1.0
    m0_cent: float = 0.0
    times: Tuple[float, ...] = PK_TIMES

    def __post_init__(self):
        if not self.k1 > 0 or not self.k2 >= 0:
            raise ValidationError(f"rates must be positive (k1={self.k1}, k2={self.k2})")


def _central_mass(k1, k2, t, m0_gut, m0_cent):
    d = k1 - k2
    e2 = ad.exp(-k2 * t)
    return e2 / d * (m0_gut * k1 * (1.0 - ad.exp((k2 - k1) * t)) + d * m0_cent)


def pk_solution(t, params: PKParams) -> Tuple[np.ndarray, np.ndarray]:
    """Gut and central masses at times ``t``; requires k1 != k2."""
    if abs(params.k1 - params.k2) < DEGENERATE_RATE_TOL:
        raise ValidationError(f"k1 and k2 coincide ({params.k1}); the closed form is degenerate")
    t = np.asarray(t, dtype=float)
    gut = params.m0_gut * np.exp(-params.k1 * t)
    cent = _central_mass(params.k1, params.k2, t, params.m0_gut, params.m0_cent)
    return gut, np.asarray(cent, dtype=float)


class PKLikelihood(LikelihoodModel):
    """Central-compartment measurements y ~ Normal(m_cent(t; k1, k2), sigma).

    theta interleaves patient offsets (k1 offset, k2 offset) so the Hessian is
    2 x 2 block-diagonal; patient rates are exp(log k_pop + offset).
    eta = (log sigma, log k1pop, log k2pop).
    """

    name = "pk"
    block_size = 2
    eta_names = ("log_sigma", "log_k1pop", "log_k2pop")

    def __init__(self, patient, time, amount, dose: float = 1.0, m0_cent: float = 0.0):
        patient = np.asarray(patient)
        codes, index = np.unique(patient, return_inverse=True)
        self.patients = codes
        self.patient_index = index.astype(int)
        self.time = np.asarray(time, dtype=float).reshape(-1)
        self.amount = np.asarray(amount, dtype=float).reshape(-1)
        if not (self.patient_index.size == self.time.size == self.amount.size):
            raise ContractViolationError("patient, time and amount columns differ in length")
        if np.any(self.time < 0):
            raise ValidationError("measurement times must be non-negative")
        self.dose = float(dose)
        self.m0_cent = float(m0_cent)

    @property
    def n_patients(self) -> int:
        return self.patients.size

    @property
    def n(self) -> int:
        return 2 * self.n_patients

    def rates(self, theta, eta):
        k1 = ad.exp(eta[1] + theta[0::2])
        k2 = ad.exp(eta[2] + theta[1::2])
        return k1, k2

    def mean(self, theta, eta):
        k1, k2 = self.rates(theta, eta)
        idx = self.patient_index
        gap = np.abs(value_of(k1)[idx] - value_of(k2)[idx])
        if gap.size and np.min(gap) < DEGENERATE_RATE_TOL:
            raise ValidationError("a patient's absorption and clearance rates coincide")
        return _central_mass(k1[idx], k2[idx], self.time, self.dose, self.m0_cent)

    def log_density(self, theta, eta):
        log_sigma = eta[0]
        r = self.amount - self.mean(theta, eta)
        N = self.amount.size
        return -0.5 * ad.tsum(r * r) * ad.exp(-2.0 * log_sigma) - N * log_sigma - 0.5 * N * LOG_2PI


def pk_likelihood(data: pd.DataFrame, dose: float = 1.0) -> PKLikelihood:
    return PKLikelihood(data["patient_id"].to_numpy(), data["time"].to_numpy(), data["amount"].to_numpy(), dose)


# ==================== Covariance models ====================

class CovarianceModel(ABC):
    """K(phi) over fixed covariates; generic over towers."""

    structure: str = "dense"
    phi_names: Tuple[str, ...] = ()

    @property
    @abstractmethod
    def n(self) -> int:
        ...

    @property
    def p(self) -> int:
        return len(self.phi_names)

    def check(self, phi) -> None:
        v = np.asarray(value_of(phi), dtype=float).reshape(-1)
        if v.size != self.p:
            raise ContractViolationError(f"phi has {v.size} entries, expected {self.p}")
        if np.any(v <= 0):
            raise ValidationError(f"covariance parameters must be positive, got {v.tolist()}")

    @abstractmethod
    def matrix(self, phi):
        """n x n covariance at ``phi``."""


class SEKernel(CovarianceModel):
    """Squared exponential with one lengthscale per input column.

    phi = (amplitude, lengthscale_1, ..., lengthscale_d).
    """

    def __init__(self, X, jitter: float = 1e-8):
        X = np.asarray(X, dtype=float)
        self.X = X.reshape(-1, 1) if X.ndim == 1 else X
        self.jitter = float(jitter)
        self.phi_names = ("amplitude",) + tuple(f"lengthscale_{i}" for i in range(self.X.shape[1]))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def _kernel(self, phi, X1, X2):
        D = (X1[:, None, :] - X2[None, :, :]) ** 2
        amplitude = phi[0]
        r = ad.tsum(D * ad.power(phi[1:], -2.0), axis=2)
        return amplitude * amplitude * ad.exp(-0.5 * r)

    def matrix(self, phi):
        self.check(phi)
        return self._kernel(phi, self.X, self.X) + self.jitter * np.eye(self.n)

    def cross(self, phi, X_new) -> np.ndarray:
        """K_* with rows at ``X_new`` and columns at the training inputs."""
        self.check(phi)
        X_new = np.asarray(X_new, dtype=float).reshape(-1, self.X.shape[1])
        return np.asarray(self._kernel(np.asarray(phi, dtype=float), X_new, self.X))

    def self_cov(self, phi, X_new) -> np.ndarray:
        self.check(phi)
        X_new = np.asarray(X_new, dtype=float).reshape(-1, self.X.shape[1])
        K = self._kernel(np.asarray(phi, dtype=float), X_new, X_new)
        return np.asarray(K) + self.jitter * np.eye(X_new.shape[0])


class DiagCovariance(CovarianceModel):
    """Per-group diag(tau_1^2, ..., tau_m^2), repeated over groups."""

    structure = "diagonal"

    def __init__(self, n_groups: int, names: Sequence[str] = ("tau1", "tau2")):
        self.n_groups = int(n_groups)
        self.phi_names = tuple(names)

    @property
    def n(self) -> int:
        return self.n_groups * self.p

    def diagonal(self, phi):
        self.check(phi)
        per_group = ad.reshape(phi * phi, (1, self.p))
        return ad.reshape(np.ones((self.n_groups, 1)) * per_group, (self.n,))

    def matrix(self, phi):
        return ad.reshape(self.diagonal(phi), (self.n, 1)) * np.eye(self.n)


def se_kernel(X, jitter: float = 1e-8) -> SEKernel:
    return SEKernel(X, jitter)


def diag_covariance(n_groups: int, names: Sequence[str] = ("tau1", "tau2")) -> DiagCovariance:
    return DiagCovariance(n_groups, names)


# ==================== Hyperpriors ====================

@dataclass(frozen=True)
class Hyperprior:
    """Prior on the natural (positive) scale of one hyperparameter."""

    kind: str  # normal | half_normal | inv_gamma
    a: float = 0.0
    b: float = 1.0

    def log_density(self, x):
        if self.kind == "normal":
            z = (x - self.a) / self.b
            return -0.5 * z * z - np.log(self.b) - 0.5 * LOG_2PI
        if self.kind == "half_normal":
            z = x / self.b
            return -0.5 * z * z - np.log(self.b) - 0.5 * LOG_2PI + np.log(2.0)
        if self.kind == "inv_gamma":
            return self.a * np.log(self.b) - float(gammaln(self.a)) - (self.a + 1.0) * ad.log(x) - self.b / x
        raise ContractViolationError(f"unknown prior kind '{self.kind}'")


@dataclass(frozen=True)
class HyperParameter:
    """``log_scale`` means the model consumes log(natural) rather than the natural value."""

    name: str
    prior: Hyperprior
    log_scale: bool = False


@dataclass(frozen=True)
class LatentGaussianModel:
    """Everything a sampler needs: likelihood, covariance and hyperpriors.

    Sampler coordinates are u = log(natural value) for every hyperparameter.
    """

    kind: str
    likelihood: LikelihoodModel
    covariance: CovarianceModel
    phi_params: Tuple[HyperParameter, ...]
    eta_params: Tuple[HyperParameter, ...]
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def p(self) -> int:
        return len(self.phi_params)

    @property
    def T(self) -> int:
        return len(self.eta_params)

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(h.name for h in self.phi_params + self.eta_params)

    @property
    def eta_positive(self) -> Tuple[bool, ...]:
        return tuple(not h.log_scale for h in self.eta_params)

    def split(self, u) -> Tuple[np.ndarray, np.ndarray]:
        """(phi, eta) in model scale from unconstrained coordinates."""
        u = np.asarray(u, dtype=float).reshape(-1)
        values = [ui if h.log_scale else np.exp(ui) for ui, h in zip(u, self.phi_params + self.eta_params)]
        values = np.asarray(values, dtype=float)
        return values[: self.p], values[self.p :]

    def model_scale_derivative(self, u) -> np.ndarray:
        """d(model value)/du per coordinate."""
        u = np.asarray(u, dtype=float).reshape(-1)
        return np.array([1.0 if h.log_scale else np.exp(ui) for ui, h in zip(u, self.phi_params + self.eta_params)])

    def to_unconstrained(self, phi, eta) -> np.ndarray:
        values = np.concatenate([np.asarray(phi, dtype=float), np.asarray(eta, dtype=float)])
        return np.array([v if h.log_scale else np.log(v) for v, h in zip(values, self.phi_params + self.eta_params)])

    def log_prior(self, u):
        """Hyperprior plus log-Jacobian in unconstrained coordinates; generic over towers."""
        total = 0.0
        for i, h in enumerate(self.phi_params + self.eta_params):
            ui = u[i]
            total = total + h.prior.log_density(ad.exp(ui)) + ui
        return total

    def log_joint(self, z):
        """log prior(u) + log N(theta | 0, K) + log pi(y | theta, eta) for z = (u, theta).

        Only defined for diagonal covariances.
        """
        if self.covariance.structure != "diagonal":
            raise ContractViolationError("the joint density is only available for diagonal covariances")
        k = self.p + self.T
        u, theta = z[:k], z[k:]
        phi = ad.exp(u[: self.p])
        eta_parts = [u[self.p + j] if h.log_scale else ad.exp(u[self.p + j]) for j, h in enumerate(self.eta_params)]
        eta = ad.stack(eta_parts) if eta_parts else np.zeros(0)
        d = self.covariance.diagonal(phi)
        n = self.covariance.n
        latent = -0.5 * ad.tsum(theta * theta / d) - 0.5 * ad.tsum(ad.log(d)) - 0.5 * n * LOG_2PI
        return self.log_prior(u) + latent + self.likelihood.log_density(theta, eta)


def _half_normal() -> Hyperprior:
    return Hyperprior("half_normal", 0.0, 1.0)


def build_model(kind: str, data: pd.DataFrame, nu: float = 4.0, dose: float = 1.0, jitter: float = 1e-8) -> LatentGaussianModel:
    """Assemble a LatentGaussianModel of the given kind from a loaded data frame."""
    if kind == "pk":
        lik = pk_likelihood(data, dose)
        cov = diag_covariance(lik.n_patients)
        phi = tuple(HyperParameter(name, _half_normal()) for name in cov.phi_names)
        eta = (
            HyperParameter("log_sigma", _half_normal(), log_scale=True),
            HyperParameter("log_k1pop", Hyperprior("normal", 2.0, 0.5), log_scale=True),
            HyperParameter("log_k2pop", Hyperprior("normal", 1.0, 0.5), log_scale=True),
        )
        return LatentGaussianModel(kind, lik, cov, phi, eta, {"dose": dose})

    X = gp_inputs(data)
    y = data["y"].to_numpy(dtype=float)
    cov = se_kernel(X, jitter)
    phi = (HyperParameter("amplitude", _half_normal()),) + tuple(
        HyperParameter(name, Hyperprior("inv_gamma", 5.0, 5.0)) for name in cov.phi_names[1:]
    )
    if kind == "gaussian":
        return LatentGaussianModel(kind, gaussian_gp(y, X), cov, phi, (HyperParameter("sigma", _half_normal()),))
    if kind == "poisson":
        return LatentGaussianModel(kind, poisson_log_gp(y, X), cov, phi, ())
    if kind == "student_t":
        eta = (HyperParameter("log_sigma", _half_normal(), log_scale=True),)
        return LatentGaussianModel(kind, student_t_gp(y, nu, X), cov, phi, eta, {"nu": nu})
    if kind == "bernoulli":
        return LatentGaussianModel(kind, bernoulli_logit_gp(y, X), cov, phi, ())
    raise ContractViolationError(f"unknown model kind '{kind}'")


MODEL_KINDS = ("gaussian", "poisson", "student_t", "bernoulli", "pk")


def default_hyperparameters(model: LatentGaussianModel) -> Tuple[np.ndarray, np.ndarray]:
    """(phi, eta) in model scale used when a run does not give them."""
    if model.kind == "pk":
        return np.array([0.2, 0.2]), np.log([0.1, 2.0, 1.0])
    phi = np.ones(model.p)
    if model.kind == "gaussian":
        return phi, np.array([0.3])
    if model.kind == "student_t":
        return phi, np.array([np.log(0.3)])
    return phi, np.zeros(0)


def natural_names(model: LatentGaussianModel) -> Tuple[str, ...]:
    """Hyperparameter names on the natural scale, as reported by the sampler."""
    return tuple(h.name[4:] if h.log_scale and h.name.startswith("log_") else h.name for h in model.phi_params + model.eta_params)


# ==================== Data loading ====================

def gp_inputs(data: pd.DataFrame) -> np.ndarray:
    cols = [c for c in data.columns if str(c).startswith("x")]
    if not cols:
        raise DataLoadError("GP data needs at least one 'x' column", line=1)
    return data[cols].to_numpy(dtype=float)


def _numeric(frame: pd.DataFrame, columns: Sequence[str], path: Path) -> pd.DataFrame:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataLoadError(f"{path}: missing column(s) {', '.join(missing)}", line=1)
    out = frame.copy()
    for c in columns:
        values = pd.to_numeric(out[c], errors="coerce")
        bad = np.flatnonzero(values.isna().to_numpy())
        if bad.size:
            # header is line 1
            raise DataLoadError(f"{path}: non-numeric value in column '{c}'", line=int(bad[0]) + 2)
        out[c] = values
    return out


def _read(path) -> pd.DataFrame:
    path = Path(path)
    try:
        return pd.read_csv(path)
    except FileNotFoundError as exc:
        raise DataLoadError(f"{path}: file not found") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataLoadError(f"{path}: {exc}") from exc


def load_pk_csv(path) -> pd.DataFrame:
    """Columns: patient_id, time, amount."""
    return _numeric(_read(path), ("patient_id", "time", "amount"), Path(path))


def load_gp_csv(path) -> pd.DataFrame:
    """Columns: x (or x0, x1, ...), y."""
    frame = _read(path)
    cols = [c for c in frame.columns if str(c).startswith("x")] + ["y"]
    return _numeric(frame, cols, Path(path))


def load_data(kind: str, path) -> pd.DataFrame:
    return load_pk_csv(path) if kind == "pk" else load_gp_csv(path)


# ==================== Simulation ====================

def simulate_pk(
    rng: np.random.Generator,
    n_patients: int = 10,
    times: Sequence[float] = PK_TIMES,
    k1pop: float = 2.0,
    k2pop: float = 1.0,
    tau: Tuple[float, float] = (0.2, 0.2),
    sigma: float = 0.1,
    dose: float = 1.0,
) -> pd.DataFrame:
    """Measurements of the central compartment for ``n_patients`` simulated patients."""
    rows = []
    for patient in range(n_patients):
        k1 = k1pop * np.exp(tau[0] * rng.standard_normal())
        k2 = k2pop * np.exp(tau[1] * rng.standard_normal())
        _, cent = pk_solution(times, PKParams(k1, k2, m0_gut=dose, times=tuple(times)))
        noisy = cent + sigma * rng.standard_normal(len(times))
        rows.extend({"patient_id": patient, "time": t, "amount": a} for t, a in zip(times, noisy))
    return pd.DataFrame(rows, columns=["patient_id", "time", "amount"])


def simulate_gp(
    kind: str,
    rng: np.random.Generator,
    n: int = 20,
    amplitude: float = 1.0,
    lengthscale: float = 1.0,
    sigma: float = 0.3,
    nu: float = 4.0,
    x_range: Tuple[float, float] = (0.0, 5.0),
) -> pd.DataFrame:
    """Observations on an even 1-D grid from a latent draw theta ~ N(0, K)."""
    x = np.linspace(x_range[0], x_range[1], n)
    K = se_kernel(x).matrix(np.array([amplitude, lengthscale]))
    theta = cholesky(K).lower @ rng.standard_normal(n)
    if kind == "gaussian":
        y = theta + sigma * rng.standard_normal(n)
    elif kind == "poisson":
        y = rng.poisson(np.exp(theta)).astype(float)
    elif kind == "student_t":
        y = theta + sigma * rng.standard_t(nu, size=n)
    elif kind == "bernoulli":
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-theta))).astype(float)
    else:
        raise ContractViolationError(f"unknown model kind '{kind}'")
    return pd.DataFrame({"x": x, "y": y})
