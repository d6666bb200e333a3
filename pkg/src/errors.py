"""Exception hierarchy for the Laplace engine."""

from __future__ import annotations

from typing import Optional, Sequence


class LaplaceError(Exception):
    """Base class for every error raised by this package."""

    recoverable: bool = True


class ContractViolationError(LaplaceError, ValueError):
    """A precondition on shapes or arguments does not hold."""


class PlanValidationError(ContractViolationError):
    """A SweepPlan breaks its ordering or seed-length rules."""


class ValidationError(ContractViolationError):
    """Model inputs (data or hyperparameters) are out of their domain."""


class NumericalDomainError(LaplaceError, ArithmeticError):
    """A non-finite value appeared while evaluating a recorded operation."""

    def __init__(self, op: str, message: Optional[str] = None):
        self.op = op
        super().__init__(message or f"non-finite result in operation '{op}'")


class DifferentiationCapabilityError(LaplaceError, TypeError):
    """An operation cannot be evaluated at the requested derivative depth."""

    def __init__(self, op: str, message: Optional[str] = None):
        self.op = op
        super().__init__(message or f"operation '{op}' does not support this derivative level")


class TapeStateError(LaplaceError, RuntimeError):
    """A tape was swept twice or used after it was discarded."""


class NotPositiveDefiniteError(LaplaceError, ArithmeticError):
    """Cholesky pivot or matrix-square-root block failed."""

    def __init__(self, index: int, message: Optional[str] = None):
        self.index = index
        super().__init__(message or f"matrix is not positive definite (pivot/block {index})")


class SingularMatrixError(LaplaceError, ArithmeticError):
    """LU or triangular pivot is numerically zero."""

    def __init__(self, index: int, message: Optional[str] = None):
        self.index = index
        super().__init__(message or f"matrix is singular (pivot {index})")


class StrategyUnsuitableError(LaplaceError):
    """The selected B-matrix strategy cannot be factored at this point."""

    def __init__(self, strategy: str, message: str):
        self.strategy = strategy
        super().__init__(f"strategy {strategy} unsuitable: {message}")


class NonConvergenceError(LaplaceError):
    """The Newton solver hit its iteration cap."""

    def __init__(self, psi_trace: Sequence[float], message: Optional[str] = None):
        self.psi_trace = list(psi_trace)
        last = self.psi_trace[-1] if self.psi_trace else float("nan")
        super().__init__(message or f"Newton solver did not converge after {len(self.psi_trace)} iterations (last psi={last!r})")


class ConditioningError(LaplaceError, ArithmeticError):
    """A covariance is indefinite beyond tolerance or cannot be jittered into shape."""


class DataLoadError(LaplaceError):
    """A data file is malformed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


class ConfigError(LaplaceError):
    """A run configuration is invalid."""

    recoverable = False
