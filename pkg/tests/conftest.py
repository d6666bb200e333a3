"""Shared fixtures and finite-difference helpers."""

import numpy as np
import pytest

from src import autodiff as ad
from src.models import (
    CovarianceModel,
    LikelihoodModel,
    build_model,
    se_kernel,
    simulate_gp,
    simulate_pk,
)
from src.newton import LinesearchResult


def rel_err(value, reference) -> float:
    """max |value - reference| / max(1, |reference|), elementwise."""
    value = np.asarray(value, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if value.size == 0:
        return 0.0
    return float(np.max(np.abs(value - reference) / np.maximum(1.0, np.abs(reference))))


def fd_gradient(f, x, h=1e-6):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def random_spd(rng, n, shift=1.0):
    A = rng.standard_normal((n, n))
    return A @ A.T / n + shift * np.eye(n)


def random_block_spd(rng, n, m):
    blocks = []
    for _ in range(n // m):
        B = rng.standard_normal((m, m))
        blocks.append(B @ B.T + 0.5 * np.eye(m))
    return np.stack(blocks)


class FlatLikelihood(LikelihoodModel):
    """log pi = 0: no curvature, no gradient."""

    name = "flat"

    def __init__(self, n):
        self._n = n

    @property
    def n(self):
        return self._n

    def log_density(self, theta, eta):
        return ad.tsum(0.0 * theta)


class FixedCovariance(CovarianceModel):
    """K that does not depend on any parameter."""

    def __init__(self, K):
        self.K = np.asarray(K, dtype=float)

    @property
    def n(self):
        return self.K.shape[0]

    def matrix(self, phi):
        return self.K


class ScaledIdentity(CovarianceModel):
    """K(phi) = phi_1 I."""

    phi_names = ("scale",)

    def __init__(self, n):
        self._n = n

    @property
    def n(self):
        return self._n

    def matrix(self, phi):
        return phi[0] * np.eye(self._n)


def stalled_linesearch(a_new, a_old, theta_of, objective_of, psi_old, max_halvings=10):
    """Every candidate is a full unit of Psi below the accepted iterate."""
    return LinesearchResult(a_old, theta_of(a_old), psi_old - 1.0, max_halvings, True)


def roundoff_linesearch(a_new, a_old, theta_of, objective_of, psi_old, max_halvings=10):
    """No candidate improves on the accepted iterate beyond roundoff."""
    return LinesearchResult(a_old, theta_of(a_old), psi_old - 1e-14, max_halvings, True)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def poisson_model():
    """Poisson GP regression, n = 10, phi = (amplitude, lengthscale)."""
    data = simulate_gp("poisson", np.random.default_rng(11), n=10, lengthscale=1.5)
    return build_model("poisson", data)


@pytest.fixture
def gaussian_model():
    data = simulate_gp("gaussian", np.random.default_rng(12), n=10, sigma=0.3)
    return build_model("gaussian", data)


@pytest.fixture
def student_t_model():
    data = simulate_gp("student_t", np.random.default_rng(13), n=8, sigma=0.3)
    return build_model("student_t", data, nu=4.0)


@pytest.fixture
def bernoulli_model():
    data = simulate_gp("bernoulli", np.random.default_rng(14), n=10)
    return build_model("bernoulli", data)


@pytest.fixture
def pk_model():
    """Four simulated patients, six measurement times each."""
    return build_model("pk", simulate_pk(np.random.default_rng(15), n_patients=4))


@pytest.fixture
def pk_eta():
    return np.log([0.1, 2.0, 1.0])


@pytest.fixture
def kernel_K():
    X = np.linspace(0.0, 5.0, 10)
    return se_kernel(X).matrix(np.array([1.0, 1.5]))
