"""
Exception hierarchy shared by every module.
"""
from typing import Optional


class RadarPRError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(RadarPRError, ValueError):
    """A value, shape or invariant check failed."""


class ParseError(ValidationError):
    """A text file could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(ValidationError):
    """A binary or JSON container is corrupt, truncated or of an unknown version."""


class DegenerateGeometryError(RadarPRError):
    """The direction matrix of an ego-velocity system is rank deficient."""


class InsufficientPointsError(RadarPRError):
    """Too few points to determine an ego-velocity."""


class EstimationFailedError(RadarPRError):
    """RANSAC did not reach the required consensus."""


class NonFiniteError(RadarPRError):
    """A forward operation produced NaN or Inf."""


class TapeError(RadarPRError):
    """Misuse of the gradient tape (non-scalar loss, consumed tape)."""


class DivergenceError(RadarPRError):
    """Training produced a NaN loss."""
