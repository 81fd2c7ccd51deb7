"""Exception hierarchy shared across the package.

Validation problems (bad inputs, malformed files) and numerical failures
(solver blow-ups, Cholesky breakdowns) are kept distinct because the CLI
maps them to different exit codes.
"""

from __future__ import annotations


class FunkflowError(Exception):
    """Base class for all package errors."""


class ValidationError(FunkflowError):
    """Invalid input data, configuration, or file contents. CLI exit code 1."""


class NumericalError(FunkflowError):
    """Numerical failure during simulation, factorization, or integration. CLI exit code 2."""


class SimulationFailure(NumericalError):
    """ODE state became non-finite; carries the offending solver step."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite ODE state at solver step {step}")


class DegenerateTrajectoryError(NumericalError):
    """Trajectory is identically zero, so characteristic times are undefined."""


class InsufficientDataError(ValidationError):
    """Too few observations for the requested computation."""


class NonFiniteLossError(NumericalError):
    """Forward pass produced a non-finite value; carries the first offending op."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite value first produced by op '{op}'")
