"""
Exception hierarchy for sparseopt.

Handlers map these onto CLI exit codes: SparseOptError subclasses exit 1,
DivergenceError exits 2.
"""

from typing import Optional, Sequence


class SparseOptError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(SparseOptError, ValueError):
    """Shapes do not match or do not divide the block shape."""


class ParameterError(SparseOptError, ValueError):
    """A hyperparameter is outside its valid range."""


class StructuralError(SparseOptError):
    """A BSR matrix or container file violates its structural invariants."""


class NonFiniteGradientError(SparseOptError):
    """A gradient contained NaN or inf; the optimizer step was rejected."""

    def __init__(self, names: Sequence[str], step: int):
        self.names = list(names)
        self.step = step
        super().__init__(
            f"non-finite gradient at step {step} for tensor(s): {', '.join(self.names)}"
        )


class DivergenceError(SparseOptError):
    """Training objective exceeded the divergence bound."""

    def __init__(self, step: int, objective: float, bound: float):
        self.step = step
        self.objective = objective
        self.bound = bound
        super().__init__(
            f"objective {objective:.6g} exceeded divergence bound {bound:.6g} at step {step}"
        )


class OracleConvergenceError(SparseOptError):
    """Coordinate descent did not reach tolerance within its sweep budget."""

    def __init__(self, sweeps: int, last_change: float):
        self.sweeps = sweeps
        self.last_change = last_change
        super().__init__(
            f"coordinate descent did not converge in {sweeps} sweeps "
            f"(last max change {last_change:.3e})"
        )


class MeasurementError(SparseOptError):
    """A timed kernel trial failed or produced no usable sample."""

    def __init__(self, message: str, cause: Optional[BaseException] = None):
        self.cause = cause
        super().__init__(message)
