"""
Standardized error report schemas.

Every failure that reaches the command line is rendered as an ``ErrorReport``
on stderr and mapped to a process exit code by its category.
"""

from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field


class ErrorSeverity(str, Enum):
    """How badly a failure compromises the run outputs."""
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class ErrorCategory(str, Enum):
    """Error categories; each maps to one exit code."""
    CONFIG = "config"
    DATA_SCHEMA = "data_schema"
    CONVERGENCE = "convergence"
    IO = "io"
    ESTIMATION = "estimation"
    INTERNAL = "internal"


class ErrorDetail(BaseModel):
    """One offending field or value."""
    field: Optional[str] = Field(None, description="Dotted path of the offending field")
    code: str = Field(..., description="Code for this detail")
    message: str = Field(..., description="What is wrong with the field")
    value: Optional[Any] = Field(None, description="Offending value, if known")


class ErrorReport(BaseModel):
    """
    Error report printed by the command-line front end.
    """
    success: bool = Field(False, description="Always false for error reports")
    error: str = Field(..., description="Summary of the failure")
    error_code: str = Field(..., description="Stable code from ErrorCodes")
    category: ErrorCategory = Field(..., description="Category; selects the exit code")
    severity: ErrorSeverity = Field(ErrorSeverity.MEDIUM, description="Severity")

    tool: str = Field("photocal", description="Tool that generated the error")
    operation: Optional[str] = Field(None, description="Command that failed")
    run_id: Optional[str] = Field(None, description="Unique run identifier")
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))

    details: Optional[List[ErrorDetail]] = Field(None, description="Per-field details (config and schema errors)")
    context: Optional[Dict[str, Any]] = Field(None, description="File paths, shapes or solver state")
    suggestion: Optional[str] = Field(None, description="What to change before re-running")


class ConfigErrorReport(ErrorReport):
    """Report for invalid configuration files or options."""
    category: Literal[ErrorCategory.CONFIG] = ErrorCategory.CONFIG
    severity: ErrorSeverity = ErrorSeverity.LOW


class DataSchemaErrorReport(ErrorReport):
    """Report for data files that do not match their schema."""
    category: Literal[ErrorCategory.DATA_SCHEMA] = ErrorCategory.DATA_SCHEMA
    severity: ErrorSeverity = ErrorSeverity.LOW


class InternalErrorReport(ErrorReport):
    """Report for unexpected failures."""
    category: Literal[ErrorCategory.INTERNAL] = ErrorCategory.INTERNAL
    severity: ErrorSeverity = ErrorSeverity.HIGH


ERROR_CATEGORY_TO_EXIT_CODE = {
    ErrorCategory.CONFIG: 2,
    ErrorCategory.DATA_SCHEMA: 3,
    ErrorCategory.CONVERGENCE: 4,
    ErrorCategory.IO: 5,
    ErrorCategory.ESTIMATION: 6,
    ErrorCategory.INTERNAL: 1,
}


class ErrorCodes:
    """Error codes carried in reports; stable across versions."""

    # Configuration
    INVALID_CONFIG = "INVALID_CONFIG"

    # Data
    INVALID_DATA = "INVALID_DATA"
    DIMENSION_MISMATCH = "DIMENSION_MISMATCH"
    TRUNCATION_TOO_SMALL = "TRUNCATION_TOO_SMALL"

    # Estimation
    DEGENERATE_RUN = "DEGENERATE_RUN"
    PEAK_UNUSABLE = "PEAK_UNUSABLE"
    INVALID_TALLY = "INVALID_TALLY"
    UNDERDETERMINED = "UNDERDETERMINED"

    # Numerics
    FIT_FAILED = "FIT_FAILED"
    NOT_CONVERGED = "NOT_CONVERGED"

    # Storage
    IO_FAILED = "IO_FAILED"

    # Internal
    INTERNAL_ERROR = "INTERNAL_ERROR"
