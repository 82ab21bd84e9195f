"""Exception hierarchy. Each category maps to a distinct CLI exit code."""

from __future__ import annotations


class AssessmentError(Exception):
    """Base class for all library errors."""

    exit_code: int = 1


class ValidationError(AssessmentError, ValueError):
    """Invalid model, spec, layout or threshold values."""

    exit_code = 3


class RecordFormatError(ValidationError):
    """Malformed record CSV. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PlacementError(ValidationError):
    """Placement search cannot run as configured."""


class UnitsError(AssessmentError):
    """A quantity arrived with the wrong units tag."""

    exit_code = 4


class ConvergenceError(AssessmentError):
    """Time integration failed to converge or diverged."""

    exit_code = 5

    def __init__(self, message: str, step: int | None = None) -> None:
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class SingularityError(AssessmentError):
    """Observer frequency response is singular at a grid frequency."""

    exit_code = 5


class OptimizationError(AssessmentError):
    """Gain optimisation could not start."""

    exit_code = 5


class CalibrationError(AssessmentError):
    """G0 calibration could not reach the coverage target."""

    exit_code = 6

    def __init__(self, message: str, best_coverage: float) -> None:
        self.best_coverage = best_coverage
        super().__init__(f"{message} (best coverage {best_coverage:.3f})")
