"""Tests for the adjoint gradient of the Laplace log marginal."""

import numpy as np
import pytest

from src.adjoint import compute_A, compute_R, logdet_gradient, marginal_gradient
from src.autodiff import SweepCounter, third_order_diag
from src.errors import ContractViolationError
from src.linalg import BlockDiagonal
from src.models import build_model, gaussian_gp, se_kernel, simulate_gp
from src.newton import BStrategy, NewtonSettings, laplace_fit
from tests.conftest import FixedCovariance, FlatLikelihood, ScaledIdentity, fd_gradient, rel_err

STRATEGIES = [BStrategy.B1, BStrategy.B2, BStrategy.B3]
TIGHT = NewtonSettings(tolerance=1e-11)


def fit_model(model, phi, eta, strategy=BStrategy.B3, settings=TIGHT):
    K = np.asarray(model.covariance.matrix(phi), dtype=float)
    return laplace_fit(K, model.likelihood, eta, settings, strategy)


def fd_marginal(model, phi, eta, strategy=BStrategy.B3, h=1e-5):
    """Central differences of the log marginal in (phi, eta)."""
    p = len(phi)

    def f(z):
        return fit_model(model, z[:p], z[p:], strategy).log_marginal

    return fd_gradient(f, np.concatenate([phi, eta]), h)


def adjoint(model, phi, eta, strategy=BStrategy.B3, **kwargs):
    fit = fit_model(model, phi, eta, strategy)
    return marginal_gradient(fit, model.covariance, phi, model.likelihood, eta, **kwargs)


class TestRAndA:
    """R and A from every factorization."""

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_against_dense_inverse(self, poisson_model, strategy):
        phi = np.array([1.0, 1.5])
        fit = fit_model(poisson_model, phi, np.zeros(0), strategy)
        K, Wd = fit.K, fit.W.to_dense()
        A_ref = np.linalg.solve(np.eye(K.shape[0]) + K @ Wd, K)
        # R = W - W A W avoids inverting a possibly singular W
        R_ref = Wd - Wd @ A_ref @ Wd
        np.testing.assert_allclose(compute_A(fit), A_ref, atol=1e-6)
        np.testing.assert_allclose(compute_R(fit), R_ref, atol=1e-6)

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_blocks_only(self, pk_model, pk_eta, strategy):
        """The block-diagonal shortcut keeps exactly the diagonal blocks."""
        if strategy == BStrategy.B1:
            pytest.skip("PK curvature need not be positive semi-definite")
        fit = fit_model(pk_model, np.array([0.2, 0.2]), pk_eta, strategy)
        full = compute_A(fit)
        blocks = compute_A(fit, blocks_only=True)
        assert isinstance(blocks, BlockDiagonal)
        for b in range(blocks.blocks.shape[0]):
            np.testing.assert_allclose(blocks.blocks[b], full[2 * b : 2 * b + 2, 2 * b : 2 * b + 2], atol=1e-12)

    def test_r_symmetric(self, poisson_model):
        fit = fit_model(poisson_model, np.array([1.0, 1.5]), np.zeros(0))
        R = compute_R(fit)
        np.testing.assert_array_equal(R, R.T)


class TestLogdetGradient:
    """Trace term in theta and eta."""

    def test_diagonal_matches_general(self, student_t_model):
        """m = 1: both methods agree."""
        eta = np.array([np.log(0.3)])
        fit = fit_model(student_t_model, np.array([1.0, 1.0]), eta)
        A = compute_A(fit)
        general = logdet_gradient(student_t_model.likelihood, fit.theta, eta, A)
        diagonal = logdet_gradient(student_t_model.likelihood, fit.theta, eta, A, method="diagonal")
        np.testing.assert_allclose(diagonal[0], general[0], atol=1e-10)
        np.testing.assert_allclose(diagonal[1], general[1], atol=1e-10)

    def test_diagonal_formula(self, poisson_model, rng):
        """s2 = 1/2 diag(A) * third derivative, for Poisson -exp(theta), at 10 random points."""
        for _ in range(10):
            phi = np.exp(rng.uniform(-0.5, 0.5, 2))
            fit = fit_model(poisson_model, phi, np.zeros(0))
            A = compute_A(fit)
            s2, s2p = logdet_gradient(poisson_model.likelihood, fit.theta, np.zeros(0), A)
            np.testing.assert_allclose(s2, -0.5 * np.diag(A) * np.exp(fit.theta), rtol=1e-8)
            assert s2p.size == 0

    def test_diagonal_rejects_blocks(self, pk_model, pk_eta):
        fit = fit_model(pk_model, np.array([0.2, 0.2]), pk_eta)
        with pytest.raises(ContractViolationError):
            logdet_gradient(pk_model.likelihood, fit.theta, pk_eta, compute_A(fit), method="diagonal")

    @pytest.mark.parametrize("dims", [1, 7])
    def test_sweep_count_independent_of_n(self, rng, dims):
        """2m forward sweeps and one reverse sweep, for every n and p."""
        for n in (8, 16, 32):
            X = np.column_stack([np.linspace(0, 5, n)] + [rng.uniform(0, 5, n) for _ in range(dims - 1)])
            y = rng.standard_normal(n)
            K = se_kernel(X).matrix(np.ones(dims + 1))
            lik = gaussian_gp(y)
            fit = laplace_fit(K, lik, np.array([0.5]))
            counter = SweepCounter()
            logdet_gradient(lik, fit.theta, fit.eta, compute_A(fit), counter=counter)
            assert (counter.forward, counter.reverse) == (2, 1)

    @pytest.mark.parametrize("dims", [1, 3, 7])
    def test_full_gradient_sweeps(self, rng, dims):
        """Whole gradient: 3 forward / 4 reverse with one eta, whatever n and p."""
        for n in (8, 24):
            X = rng.uniform(0, 5, (n, dims))
            lik = gaussian_gp(rng.standard_normal(n))
            kernel = se_kernel(X)
            phi = np.ones(dims + 1)
            fit = laplace_fit(kernel.matrix(phi), lik, np.array([0.5]))
            counter = SweepCounter()
            marginal_gradient(fit, kernel, phi, lik, counter=counter)
            assert (counter.forward, counter.reverse) == (3, 4)

    def test_full_gradient_sweeps_no_eta(self, poisson_model):
        counter = SweepCounter()
        adjoint(poisson_model, np.array([1.0, 1.5]), np.zeros(0), counter=counter)
        assert (counter.forward, counter.reverse) == (2, 2)

    def test_full_gradient_sweeps_pk(self, pk_model, pk_eta):
        """m = 2 and three eta components: 2m + 1 forward, 4 reverse."""
        counter = SweepCounter()
        adjoint(pk_model, np.array([0.2, 0.2]), pk_eta, counter=counter)
        assert (counter.forward, counter.reverse) == (5, 4)

    def test_sweep_count_pk(self, pk_model, pk_eta):
        fit = fit_model(pk_model, np.array([0.2, 0.2]), pk_eta)
        counter = SweepCounter()
        logdet_gradient(pk_model.likelihood, fit.theta, pk_eta, compute_A(fit, blocks_only=True), counter=counter)
        assert (counter.forward, counter.reverse) == (4, 1)

    def test_third_order_reference(self, student_t_model):
        """General method against the explicit third-derivative diagonal."""
        eta = np.array([np.log(0.3)])
        fit = fit_model(student_t_model, np.array([1.0, 1.0]), eta)
        A = compute_A(fit)
        lik = student_t_model.likelihood
        third = third_order_diag(lambda th: lik.log_density(th, eta), fit.theta)
        s2, _ = logdet_gradient(lik, fit.theta, eta, A)
        np.testing.assert_allclose(s2, 0.5 * np.diag(A) * third, atol=1e-10)


class TestMarginalGradient:
    """Full gradient against closed forms and finite differences."""

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_gaussian_closed_form(self, rng, strategy):
        """Exact evidence gradient for Gaussian observations."""
        X = np.linspace(0, 5, 10)
        y = rng.standard_normal(10)
        kernel = se_kernel(X)
        phi, sigma = np.array([1.2, 0.8]), 0.4
        fit = laplace_fit(kernel.matrix(phi), gaussian_gp(y), np.array([sigma]), strategy=strategy)
        grad = marginal_gradient(fit, kernel, phi, gaussian_gp(y))

        C = kernel.matrix(phi) + sigma**2 * np.eye(10)
        alpha = np.linalg.solve(C, y)
        M = np.outer(alpha, alpha) - np.linalg.inv(C)
        h = 1e-6
        expected_phi = []
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            dK = (kernel.matrix(phi + e) - kernel.matrix(phi - e)) / (2 * h)
            expected_phi.append(0.5 * np.sum(M * dK))
        expected_sigma = 0.5 * np.trace(M) * 2 * sigma
        evidence = -0.5 * y @ alpha - 0.5 * np.linalg.slogdet(C)[1] - 5.0 * np.log(2 * np.pi)
        assert fit.log_marginal == pytest.approx(evidence, abs=1e-8)
        assert rel_err(grad.grad_phi, expected_phi) < 1e-6
        assert rel_err(grad.grad_eta, [expected_sigma]) < 1e-6

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_poisson(self, poisson_model, strategy):
        phi = np.array([1.0, 1.5])
        grad = adjoint(poisson_model, phi, np.zeros(0), strategy)
        assert rel_err(grad.grad_phi, fd_marginal(poisson_model, phi, np.zeros(0), strategy)) < 1e-4
        assert grad.grad_eta.size == 0

    def test_student_t_b3(self, student_t_model):
        phi, eta = np.array([1.0, 1.0]), np.array([np.log(0.3)])
        grad = adjoint(student_t_model, phi, eta)
        assert rel_err(grad.as_vector(), fd_marginal(student_t_model, phi, eta)) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_student_t_simulated(self, seed):
        """Heavy-tailed data at several seeds: the gradient is taken at a genuine mode."""
        model = build_model("student_t", simulate_gp("student_t", np.random.default_rng(seed), n=10))
        phi, eta = np.array([1.1, 1.3]), np.array([np.log(0.3)])
        fit = fit_model(model, phi, eta)
        assert fit.self_consistency() < 10 * TIGHT.tolerance
        grad = marginal_gradient(fit, model.covariance, phi, model.likelihood, eta)
        assert rel_err(grad.as_vector(), fd_marginal(model, phi, eta)) < 1e-4

    def test_bernoulli(self, bernoulli_model):
        phi = np.array([1.0, 1.0])
        grad = adjoint(bernoulli_model, phi, np.zeros(0), BStrategy.B1)
        assert rel_err(grad.grad_phi, fd_marginal(bernoulli_model, phi, np.zeros(0), BStrategy.B1)) < 1e-4

    @pytest.mark.parametrize("strategy", [BStrategy.B2, BStrategy.B3])
    def test_pk(self, pk_model, pk_eta, strategy):
        """Block size 2 with three eta components."""
        phi = np.array([0.2, 0.2])
        grad = adjoint(pk_model, phi, pk_eta, strategy)
        assert rel_err(grad.as_vector(), fd_marginal(pk_model, phi, pk_eta, strategy)) < 1e-3

    def test_pk_blocks_only_agrees(self, pk_model, pk_eta):
        phi = np.array([0.2, 0.2])
        full = adjoint(pk_model, phi, pk_eta)
        short = adjoint(pk_model, phi, pk_eta, blocks_only=True)
        np.testing.assert_allclose(short.as_vector(), full.as_vector(), rtol=1e-10, atol=1e-12)

    def test_diagonal_method(self, student_t_model):
        phi, eta = np.array([1.0, 1.0]), np.array([np.log(0.3)])
        general = adjoint(student_t_model, phi, eta)
        diagonal = adjoint(student_t_model, phi, eta, method="diagonal")
        np.testing.assert_allclose(diagonal.as_vector(), general.as_vector(), atol=1e-9)

    def test_keep_intermediates(self, student_t_model):
        phi, eta = np.array([1.0, 1.0]), np.array([np.log(0.3)])
        bare = adjoint(student_t_model, phi, eta)
        full = adjoint(student_t_model, phi, eta, keep_intermediates=True)
        assert bare.s2 is None and bare.omega is None
        assert full.omega.shape == (8, 8)
        assert full.s2.shape == full.u.shape == (8,)
        np.testing.assert_array_equal(full.as_vector(), bare.as_vector())

    def test_no_hyperparameters(self, kernel_K):
        """Nothing to differentiate: no sweeps at all."""
        fit = laplace_fit(kernel_K, FlatLikelihood(10), np.zeros(0))
        counter = SweepCounter()
        grad = marginal_gradient(fit, FixedCovariance(kernel_K), np.zeros(0), FlatLikelihood(10), counter=counter)
        assert grad.as_vector().size == 0
        assert counter.total == 0
        assert grad.log_marginal == fit.log_marginal

    def test_flat_likelihood_scaled_identity(self):
        """log pi = 0 gives log marginal 0 for every scale, so the gradient vanishes."""
        cov = ScaledIdentity(5)
        phi = np.array([2.0])
        fit = laplace_fit(cov.matrix(phi), FlatLikelihood(5), np.zeros(0))
        grad = marginal_gradient(fit, cov, phi, FlatLikelihood(5))
        np.testing.assert_allclose(grad.grad_phi, [0.0], atol=1e-12)

    def test_eta_mismatch(self, student_t_model):
        phi, eta = np.array([1.0, 1.0]), np.array([np.log(0.3)])
        fit = fit_model(student_t_model, phi, eta)
        with pytest.raises(ContractViolationError):
            marginal_gradient(fit, student_t_model.covariance, phi, student_t_model.likelihood, eta + 0.1)

    def test_omega_shape_checked(self, poisson_model):
        from src.adjoint import grad_phi

        with pytest.raises(ContractViolationError):
            grad_phi(poisson_model.covariance, np.array([1.0, 1.5]), np.zeros((3, 3)))
