"""Exception hierarchy.

Every error carries an ``exit_code`` so the command-line front end can map
failures onto its documented exit-code contract without string matching.
"""

from __future__ import annotations


class SlqError(Exception):
    exit_code = 1


class ValidationError(SlqError, ValueError):
    """Malformed input: wrong shapes, non-finite entries, broken invariants."""

    exit_code = 2


class ConfigError(ValidationError):
    exit_code = 2


class NumericalError(SlqError, ArithmeticError):
    exit_code = 1


class ConditioningError(NumericalError):
    """A block that must be positive definite is singular or indefinite."""


class IterationLimitError(NumericalError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class PreconditionError(SlqError):
    """Stabilizability/detectability failure or an inadmissible gain."""

    exit_code = 5


class DataError(SlqError):
    exit_code = 3


class RankDeficiencyError(DataError):
    def __init__(self, message: str, trajectory: int | None = None):
        super().__init__(message)
        self.trajectory = trajectory


class HorizonTooShortError(DataError, ValidationError):
    exit_code = 3


class SimulationOverflowError(DataError):
    def __init__(self, trajectory: int, step: int):
        super().__init__(f"non-finite state in trajectory {trajectory} at step {step}")
        self.trajectory = trajectory
        self.step = step


class DatasetError(DataError):
    """Base for on-disk dataset problems. ``code`` distinguishes the cause."""

    code = "dataset"


class FormatVersionError(DatasetError):
    code = "format-version"


class ChecksumError(DatasetError):
    code = "checksum"


class TruncationError(DatasetError):
    code = "truncated"


class SolverError(SlqError):
    """The conic solve ended in a status other than optimal."""

    exit_code = 4

    def __init__(self, message: str, status: str | None = None):
        super().__init__(message)
        self.status = status


class SizeCapError(ValidationError):
    pass


class StageError(SlqError):
    """Wraps a failure inside a pipeline stage, keeping the cause's exit code."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
