"""Pydantic schemas: run configuration and every report the CLI and API emit."""

from __future__ import annotations

from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

from .newton import BStrategy, NewtonSettings


class ModelKind(str, Enum):
    """Model zoo entries."""
    GAUSSIAN = "gaussian"
    POISSON = "poisson"
    STUDENT_T = "student_t"
    BERNOULLI = "bernoulli"
    PK = "pk"


class SampleMethod(str, Enum):
    MARGINAL = "marginal"  # HMC on (phi, eta), theta integrated out
    FULL = "full"  # HMC on (phi, eta, theta)


class GradientMethod(str, Enum):
    GENERAL = "general"
    DIAGONAL = "diagonal"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- Run configuration ---

class ModelConfig(_Strict):
    """Which model, which data, and where to evaluate it."""
    kind: ModelKind
    data: Optional[str] = None
    nu: float = Field(4.0, gt=0)
    dose: float = Field(1.0, gt=0)
    jitter: float = Field(1e-8, ge=0)
    phi: Optional[List[float]] = None
    eta: Optional[List[float]] = None


class NewtonConfig(_Strict):
    tolerance: float = Field(1e-8, gt=0)
    max_iterations: int = Field(100, ge=1)
    linesearch: bool = True
    max_halvings: int = Field(10, ge=0)

    def to_settings(self, theta0=None, check_structure: bool = False, tolerance: Optional[float] = None) -> NewtonSettings:
        return NewtonSettings(
            tolerance=tolerance or self.tolerance,
            max_iterations=self.max_iterations,
            linesearch=self.linesearch,
            max_halvings=self.max_halvings,
            theta0=theta0,
            check_structure=check_structure,
        )


class SamplerConfig(_Strict):
    method: SampleMethod = SampleMethod.MARGINAL
    chains: int = Field(4, ge=1)
    warmup: int = Field(500, ge=0)
    iterations: int = Field(1000, ge=1)
    step_size: float = Field(0.1, gt=0)
    leapfrog_steps: int = Field(10, ge=1)
    target_accept: float = Field(0.8, gt=0, lt=1)


class GradcheckConfig(_Strict):
    tolerance: float = Field(1e-3, gt=0)
    solve_tolerance: float = Field(1e-12, gt=0)
    method: GradientMethod = GradientMethod.GENERAL


class BenchConfig(_Strict):
    sizes: List[int] = Field(default_factory=lambda: [64, 128, 256])
    repetitions: int = Field(10, ge=1)
    input_dims: List[int] = Field(default_factory=lambda: [1])


class SimulateConfig(_Strict):
    n_patients: int = Field(10, ge=1)
    times: List[float] = Field(default_factory=lambda: [0.083, 0.167, 0.25, 1.0, 2.0, 4.0])
    k1pop: float = Field(2.0, gt=0)
    k2pop: float = Field(1.0, gt=0)
    tau: List[float] = Field(default_factory=lambda: [0.2, 0.2], min_length=2, max_length=2)
    sigma: float = Field(0.1, gt=0)
    n: int = Field(20, ge=1)
    amplitude: float = Field(1.0, gt=0)
    lengthscale: float = Field(1.0, gt=0)


class RunConfig(_Strict):
    """Top-level run configuration; unknown keys are rejected at every level."""
    model: ModelConfig
    strategy: BStrategy = BStrategy.B3
    newton: NewtonConfig = Field(default_factory=NewtonConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    simulate: SimulateConfig = Field(default_factory=SimulateConfig)
    seed: int = Field(0, ge=0)
    out_dir: str = "runs"


# --- Reports ---

class FitReport(BaseModel):
    model: ModelKind
    strategy: BStrategy
    log_marginal: float
    psi: float
    log_det_B: float
    iterations: int
    psi_trace: List[float]
    halvings: List[int]
    phi: Dict[str, float]
    eta: Dict[str, float]
    self_consistency: float
    elapsed_ms: float


class GradcheckRow(BaseModel):
    component: str
    adjoint: float
    finite_difference: float
    rel_error: float


class GradcheckReport(BaseModel):
    model: ModelKind
    strategy: BStrategy
    method: GradientMethod
    rows: List[GradcheckRow]
    max_rel_error: float
    tolerance: float
    passed: bool


class ParameterSummary(BaseModel):
    name: str
    mean: float
    sd: float
    ess: float
    ess_per_second: float
    mcse: float


class SampleDiagnostics(BaseModel):
    model: ModelKind
    method: SampleMethod
    chains: int
    draws_per_chain: int
    acceptance_rate: float
    divergence_rate: float
    divergence_warning: bool
    step_sizes: List[float]
    laplace_solves: int
    gradient_evals: int
    elapsed_s: float
    parameters: List[ParameterSummary]


class BenchRow(BaseModel):
    n: int
    p: int
    T: int
    m: int
    fit_ms: float
    gradient_ms: float
    gradient_diagonal_ms: Optional[float] = None
    sweeps_forward: int
    sweeps_reverse: int


# --- HTTP API ---

class InlineData(_Strict):
    """Columns of a data set, as in the CSV files."""
    x: Optional[List[List[float]]] = None
    y: Optional[List[float]] = None
    patient_id: Optional[List[int]] = None
    time: Optional[List[float]] = None
    amount: Optional[List[float]] = None


class FitRequest(_Strict):
    model: str
    data: InlineData
    phi: Optional[List[float]] = None
    eta: Optional[List[float]] = None
    strategy: BStrategy = BStrategy.B3
    nu: float = Field(4.0, gt=0)


class GradientRequest(FitRequest):
    method: GradientMethod = GradientMethod.GENERAL


class PredictRequest(FitRequest):
    x_new: List[List[float]]


class FitResponse(BaseModel):
    log_marginal: float
    theta: List[float]
    iterations: int
    strategy: BStrategy


class GradientResponse(BaseModel):
    log_marginal: float
    names: List[str]
    grad_phi: List[float]
    grad_eta: List[float]


class PredictResponse(BaseModel):
    mean: List[float]
    variance: List[float]
    cov: List[List[float]]


class ModelInfo(BaseModel):
    kind: ModelKind
    block_size: int
    phi: List[str]
    eta: List[str]
    full_hmc: bool


class HealthResponse(BaseModel):
    """Health check response."""
    status: str
    version: str
    timestamp: datetime


class ErrorResponse(BaseModel):
    """Error response."""
    error: str
    message: str
    recoverable: bool = True
