"""
Exception hierarchy shared by the numerical modules.

Each exception carries the error category and code used when it reaches the
command line.
"""

from typing import Any, Dict, List, Optional

from ..schemas.errors import ErrorCategory, ErrorCodes


class PhotocalError(Exception):
    """Base class for all photocal failures."""

    category: ErrorCategory = ErrorCategory.INTERNAL
    error_code: str = ErrorCodes.INTERNAL_ERROR

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None,
                 suggestion: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.context = context or {}
        self.suggestion = suggestion


class ConfigError(PhotocalError):
    """Invalid configuration file or option."""
    category = ErrorCategory.CONFIG
    error_code = ErrorCodes.INVALID_CONFIG

    def __init__(self, message: str, field_paths: Optional[List[str]] = None, **kwargs):
        super().__init__(message, **kwargs)
        self.field_paths = field_paths or []


class DataSchemaError(PhotocalError):
    """Data file does not conform to its schema."""
    category = ErrorCategory.DATA_SCHEMA
    error_code = ErrorCodes.INVALID_DATA


class DimensionError(DataSchemaError, ValueError):
    """Array shapes or truncations do not match."""
    error_code = ErrorCodes.DIMENSION_MISMATCH


class TruncationError(DataSchemaError, ValueError):
    """Photon-number truncation too small for the requested distribution."""
    error_code = ErrorCodes.TRUNCATION_TOO_SMALL

    def __init__(self, message: str, required_truncation: int, **kwargs):
        super().__init__(message, **kwargs)
        self.required_truncation = required_truncation


class EstimationError(PhotocalError, ValueError):
    """An estimator cannot be evaluated on the given data."""
    category = ErrorCategory.ESTIMATION
    error_code = ErrorCodes.DEGENERATE_RUN


class DegenerateRunError(EstimationError):
    """Denominator of a ratio estimator is not positive."""


class PeakUnusableError(EstimationError):
    """A PNRD peak cannot be used for efficiency estimation."""
    error_code = ErrorCodes.PEAK_UNUSABLE


class InvalidTallyError(EstimationError):
    """Counting tallies are inconsistent (e.g. n_a > n_p)."""
    error_code = ErrorCodes.INVALID_TALLY


class UnderdeterminedError(EstimationError):
    """Not enough independent settings or repeats for the requested estimate."""
    error_code = ErrorCodes.UNDERDETERMINED


class ConvergenceError(PhotocalError):
    """An iterative method failed to converge."""
    category = ErrorCategory.CONVERGENCE
    error_code = ErrorCodes.NOT_CONVERGED


class FitError(ConvergenceError):
    """Histogram mixture fit failed."""
    error_code = ErrorCodes.FIT_FAILED

    def __init__(self, message: str, residual_norm: float, **kwargs):
        super().__init__(message, **kwargs)
        self.residual_norm = residual_norm


class StorageError(PhotocalError):
    """Reading or writing a file failed."""
    category = ErrorCategory.IO
    error_code = ErrorCodes.IO_FAILED
