"""Command-line harness: fit, gradcheck, sample, bench, simulate, serve."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from .adjoint import marginal_gradient
from .autodiff import SweepCounter
from .config import dump_config, get_settings, load_config, parse_config, resolve_data_path
from .errors import (
    ConfigError,
    ContractViolationError,
    DataLoadError,
    LaplaceError,
    NonConvergenceError,
    NumericalDomainError,
    StrategyUnsuitableError,
)
from .hmc import FullTarget, HmcSettings, MarginalTarget, effective_sample_size, mcse, run_chains
from .models import (
    LatentGaussianModel,
    build_model,
    default_hyperparameters,
    load_data,
    natural_names,
    simulate_gp,
    simulate_pk,
)
from .newton import BStrategy, LaplaceFit, NewtonSettings, laplace_fit
from .schemas import (
    BenchRow,
    FitReport,
    GradcheckReport,
    GradcheckRow,
    ModelKind,
    ParameterSummary,
    RunConfig,
    SampleDiagnostics,
    SampleMethod,
    SimulateConfig,
)
from .storage import RunStorage

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NONCONVERGENCE = 2
EXIT_STRATEGY = 3
EXIT_GRADCHECK = 4


# ==================== Shared helpers ====================

def simulate_data(kind: str, sim: SimulateConfig, seed: int) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    if kind == ModelKind.PK.value:
        return simulate_pk(
            rng,
            n_patients=sim.n_patients,
            times=sim.times,
            k1pop=sim.k1pop,
            k2pop=sim.k2pop,
            tau=tuple(sim.tau),
            sigma=sim.sigma,
        )
    return simulate_gp(kind, rng, n=sim.n, amplitude=sim.amplitude, lengthscale=sim.lengthscale, sigma=sim.sigma)


def prepare(config: RunConfig, config_path: Optional[Path]) -> Tuple[LatentGaussianModel, np.ndarray, np.ndarray]:
    """Model plus the (phi, eta) it is evaluated at."""
    kind = config.model.kind.value
    path = resolve_data_path(config, config_path or Path.cwd() / "config.json")
    if path is not None:
        data = load_data(kind, path)
    else:
        logger.info("no data file given; simulating %s data with seed %d", kind, config.seed)
        data = simulate_data(kind, config.simulate, config.seed)
    model = build_model(kind, data, nu=config.model.nu, dose=config.model.dose, jitter=config.model.jitter)

    phi, eta = default_hyperparameters(model)
    if config.model.phi is not None:
        phi = np.asarray(config.model.phi, dtype=float)
    if config.model.eta is not None:
        eta = np.asarray(config.model.eta, dtype=float)
    if phi.size != model.p or eta.size != model.T:
        raise ConfigError(f"model '{kind}' takes {model.p} phi and {model.T} eta values, got {phi.size} and {eta.size}")
    return model, phi, eta


def fit_at(
    model: LatentGaussianModel,
    phi,
    eta,
    strategy: BStrategy,
    settings: NewtonSettings,
) -> LaplaceFit:
    K = np.asarray(model.covariance.matrix(np.asarray(phi, dtype=float)), dtype=float)
    return laplace_fit(K, model.likelihood, eta, settings, strategy)


# ==================== Commands ====================

def cmd_fit(config: RunConfig, config_path: Optional[Path], storage: RunStorage) -> int:
    model, phi, eta = prepare(config, config_path)
    started = time.perf_counter()
    debug = get_settings().debug
    fit = fit_at(model, phi, eta, config.strategy, config.newton.to_settings(check_structure=debug))
    elapsed = 1e3 * (time.perf_counter() - started)

    names = [h.name for h in model.phi_params], [h.name for h in model.eta_params]
    report = FitReport(
        model=config.model.kind,
        strategy=config.strategy,
        log_marginal=fit.log_marginal,
        psi=fit.psi,
        log_det_B=fit.log_det_B,
        iterations=fit.iterations,
        psi_trace=fit.psi_trace,
        halvings=fit.halvings,
        phi=dict(zip(names[0], map(float, phi))),
        eta=dict(zip(names[1], map(float, eta))),
        self_consistency=fit.self_consistency(),
        elapsed_ms=elapsed,
    )
    storage.save_report("fit", report)
    storage.save_table("theta", pd.DataFrame({"index": np.arange(fit.n), "theta": fit.theta, "grad_loglik": fit.grad_loglik}))
    storage.save_table(
        "trace",
        pd.DataFrame({"iteration": np.arange(1, fit.iterations + 1), "psi": fit.psi_trace, "halvings": fit.halvings}),
    )
    logger.info("fit: log marginal %.12g after %d iterations", fit.log_marginal, fit.iterations)
    return EXIT_OK


def finite_difference_gradient(model: LatentGaussianModel, phi, eta, strategy: BStrategy, settings: NewtonSettings) -> np.ndarray:
    """Central differences of the re-solved log marginal in model scale."""
    x = np.concatenate([np.asarray(phi, dtype=float), np.asarray(eta, dtype=float)])
    p = model.p
    out = np.zeros(x.size)
    for i in range(x.size):
        h = 1e-5 * max(1.0, abs(x[i]))
        values = []
        for sign in (1.0, -1.0):
            xs = x.copy()
            xs[i] += sign * h
            values.append(fit_at(model, xs[:p], xs[p:], strategy, settings).log_marginal)
        out[i] = (values[0] - values[1]) / (2.0 * h)
    return out


def cmd_gradcheck(config: RunConfig, config_path: Optional[Path], storage: RunStorage) -> int:
    model, phi, eta = prepare(config, config_path)
    check = config.gradcheck
    debug = get_settings().debug
    tight = config.newton.to_settings(check_structure=debug, tolerance=check.solve_tolerance)
    fit = fit_at(model, phi, eta, config.strategy, tight)
    grad = marginal_gradient(
        fit, model.covariance, phi, model.likelihood, eta, method=check.method.value, keep_intermediates=debug
    )
    if grad.s2 is not None:
        storage.save_table(
            "intermediates", pd.DataFrame({"theta": fit.theta, "a": fit.a, "s2": grad.s2, "u": grad.u})
        )
    adjoint = grad.as_vector()
    reference = finite_difference_gradient(model, phi, eta, config.strategy, tight)

    rows = [
        GradcheckRow(
            component=name,
            adjoint=float(a),
            finite_difference=float(r),
            rel_error=float(abs(a - r) / max(1.0, abs(r))),
        )
        for name, a, r in zip(model.names, adjoint, reference)
    ]
    worst = max((row.rel_error for row in rows), default=0.0)
    report = GradcheckReport(
        model=config.model.kind,
        strategy=config.strategy,
        method=check.method,
        rows=rows,
        max_rel_error=worst,
        tolerance=check.tolerance,
        passed=worst <= check.tolerance,
    )
    storage.save_table("gradcheck", pd.DataFrame([row.model_dump() for row in rows]))
    storage.save_report("gradcheck", report)
    logger.info("gradcheck: max relative error %.3e (tolerance %.1e)", worst, check.tolerance)
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_sample(config: RunConfig, config_path: Optional[Path], storage: RunStorage) -> int:
    model, phi, eta = prepare(config, config_path)
    s = config.sampler
    hmc = HmcSettings(
        step_size=s.step_size,
        leapfrog_steps=s.leapfrog_steps,
        iterations=s.iterations,
        warmup=s.warmup,
        target_accept=s.target_accept,
        chains=s.chains,
        seed=config.seed,
    )
    u0 = model.to_unconstrained(phi, eta)
    if s.method == SampleMethod.FULL:
        target = FullTarget(model)
        q0 = np.concatenate([u0, np.zeros(model.covariance.n)])
    else:
        target = MarginalTarget(model, config.strategy, config.newton.to_settings())
        q0 = u0

    results = run_chains(target, q0, hmc, workers=get_settings().workers)
    k = model.p + model.T
    names = list(natural_names(model))

    frames = []
    for r in results:
        frame = pd.DataFrame(np.exp(r.draws[:, :k]), columns=names)
        latent = r.draws[:, k:] if s.method == SampleMethod.FULL else r.latent
        for j in range(latent.shape[1]):
            frame[f"theta_{j}"] = latent[:, j]
        frame.insert(0, "iteration", np.arange(s.iterations))
        frame.insert(0, "chain", r.chain)
        frames.append(frame)
    storage.save_table("draws", pd.concat(frames, ignore_index=True))

    elapsed = float(sum(r.elapsed for r in results))
    parameters = []
    for j, name in enumerate(names):
        x = np.stack([np.exp(r.draws[:, j]) for r in results])
        ess = effective_sample_size(x)
        parameters.append(
            ParameterSummary(
                name=name,
                mean=float(x.mean()),
                sd=float(x.std(ddof=1)),
                ess=ess,
                ess_per_second=ess / elapsed if elapsed > 0 else 0.0,
                mcse=mcse(x),
            )
        )
    total = s.chains * s.iterations
    divergence_rate = sum(r.divergences for r in results) / total
    diagnostics = SampleDiagnostics(
        model=config.model.kind,
        method=s.method,
        chains=s.chains,
        draws_per_chain=s.iterations,
        acceptance_rate=float(np.mean([r.accept_rate for r in results])),
        divergence_rate=divergence_rate,
        divergence_warning=divergence_rate > 0.2,
        step_sizes=[r.step_size for r in results],
        laplace_solves=sum(r.solves for r in results),
        gradient_evals=sum(r.gradient_evals for r in results),
        elapsed_s=elapsed,
        parameters=parameters,
    )
    if diagnostics.divergence_warning:
        logger.warning("%.0f%% of transitions diverged", 100 * divergence_rate)
    storage.save_report("diagnostics", diagnostics)
    return EXIT_OK


def _bench_model(kind: str, n: int, input_dim: int, rng: np.random.Generator) -> LatentGaussianModel:
    if kind == ModelKind.PK.value:
        return build_model(kind, simulate_pk(rng, n_patients=max(1, n // 2)))
    data = simulate_gp(kind, rng, n=n)
    for d in range(1, input_dim):
        data[f"x{d}"] = rng.uniform(0.0, 5.0, n)
    return build_model(kind, data)


def cmd_bench(config: RunConfig, config_path: Optional[Path], storage: RunStorage) -> int:
    kind = config.model.kind.value
    bench = config.bench
    rng = np.random.default_rng(config.seed)
    rows: List[BenchRow] = []
    for input_dim in bench.input_dims:
        for n in bench.sizes:
            model = _bench_model(kind, n, input_dim, rng)
            phi, eta = default_hyperparameters(model)
            settings = config.newton.to_settings()
            fit_ms, grad_ms, diag_ms = [], [], []
            counter = SweepCounter()
            for _ in range(bench.repetitions):
                t0 = time.perf_counter()
                fit = fit_at(model, phi, eta, config.strategy, settings)
                t1 = time.perf_counter()
                counter.reset()
                marginal_gradient(fit, model.covariance, phi, model.likelihood, eta, counter=counter)
                t2 = time.perf_counter()
                fit_ms.append(1e3 * (t1 - t0))
                grad_ms.append(1e3 * (t2 - t1))
                if model.likelihood.block_size == 1:
                    t3 = time.perf_counter()
                    marginal_gradient(fit, model.covariance, phi, model.likelihood, eta, method="diagonal")
                    diag_ms.append(1e3 * (time.perf_counter() - t3))
            row = BenchRow(
                n=model.likelihood.n,
                p=model.p,
                T=model.T,
                m=model.likelihood.block_size,
                fit_ms=float(np.median(fit_ms)),
                gradient_ms=float(np.median(grad_ms)),
                gradient_diagonal_ms=float(np.median(diag_ms)) if diag_ms else None,
                sweeps_forward=counter.forward,
                sweeps_reverse=counter.reverse,
            )
            logger.info("bench n=%d p=%d: gradient %.2f ms, %d sweeps", row.n, row.p, row.gradient_ms, counter.total)
            rows.append(row)
    storage.save_table("bench", pd.DataFrame([row.model_dump() for row in rows]))
    return EXIT_OK


def cmd_simulate(config: RunConfig, storage: RunStorage) -> int:
    kind = config.model.kind.value
    data = simulate_data(kind, config.simulate, config.seed)
    storage.save_table(f"{kind}_data", data)
    return EXIT_OK


def cmd_serve(host: str, port: int) -> int:
    import uvicorn

    uvicorn.run("src.api:app", host=host, port=port, reload=get_settings().debug)
    return EXIT_OK


# ==================== Entry point ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laplace", description="Integrated Laplace approximation with adjoint gradients")
    parser.add_argument("--log-level", default=None, help="overrides LAPLACE_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (
        ("fit", "Laplace fit at fixed hyperparameters"),
        ("gradcheck", "adjoint gradient against finite differences"),
        ("sample", "HMC over hyperparameters (marginal) or everything (full)"),
        ("bench", "timing and sweep counts as n grows"),
        ("simulate", "write a simulated data set"),
    ):
        cmd = sub.add_parser(name, help=helptext)
        cmd.add_argument("--config", type=Path, required=name != "simulate")
        cmd.add_argument("--seed", type=int)
        cmd.add_argument("--out", type=Path)
        cmd.add_argument("--strategy", choices=[s.value for s in BStrategy])
        if name == "sample":
            cmd.add_argument("--method", choices=[m.value for m in SampleMethod])
        if name == "simulate":
            cmd.add_argument("--kind", choices=[k.value for k in ModelKind], default=None)

    serve = sub.add_parser("serve", help="run the HTTP API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _config_for(args) -> RunConfig:
    overrides = {"seed": args.seed, "strategy": args.strategy}
    if args.config is not None:
        config = load_config(args.config, overrides)
    else:
        kind = getattr(args, "kind", None) or ModelKind.PK.value
        config = parse_config({"model": {"kind": kind}, **{k: v for k, v in overrides.items() if v is not None}})
    if getattr(args, "kind", None) and args.config is not None:
        config.model.kind = ModelKind(args.kind)
    if getattr(args, "method", None):
        config.sampler = config.sampler.model_copy(update={"method": SampleMethod(args.method)})
    return config


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if args.command == "serve":
        return cmd_serve(args.host, args.port)

    try:
        config = _config_for(args)
        storage = RunStorage(args.out or config.out_dir)
        storage.save_document("config", dump_config(config))
        if args.command == "simulate":
            return cmd_simulate(config, storage)
        command = {"fit": cmd_fit, "gradcheck": cmd_gradcheck, "sample": cmd_sample, "bench": cmd_bench}[args.command]
        return command(config, args.config, storage)
    except (ConfigError, DataLoadError, ContractViolationError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (NonConvergenceError, NumericalDomainError) as exc:
        logger.error("%s", exc)
        return EXIT_NONCONVERGENCE
    except StrategyUnsuitableError as exc:
        logger.error("%s", exc)
        return EXIT_STRATEGY
    except LaplaceError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
