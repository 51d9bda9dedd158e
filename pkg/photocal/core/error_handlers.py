"""
Error handling utilities for the command-line front end.

Exceptions raised anywhere in a command become one ``ErrorReport`` on stderr
and a process exit code chosen by the report category.
"""

import logging
import sys
from typing import Any, Dict, Optional, TextIO

from ..schemas.errors import (
    ERROR_CATEGORY_TO_EXIT_CODE,
    ConfigErrorReport,
    DataSchemaErrorReport,
    ErrorCategory,
    ErrorCodes,
    ErrorDetail,
    ErrorReport,
    ErrorSeverity,
    InternalErrorReport,
)
from .exceptions import ConfigError, DataSchemaError, PhotocalError

logger = logging.getLogger(__name__)

_SEVERITY = {
    ErrorCategory.CONFIG: ErrorSeverity.LOW,
    ErrorCategory.DATA_SCHEMA: ErrorSeverity.LOW,
    ErrorCategory.ESTIMATION: ErrorSeverity.MEDIUM,
    ErrorCategory.CONVERGENCE: ErrorSeverity.MEDIUM,
    ErrorCategory.IO: ErrorSeverity.HIGH,
    ErrorCategory.INTERNAL: ErrorSeverity.HIGH,
}


class ErrorHandler:
    """Centralized construction of error reports."""

    @staticmethod
    def create_error_report(
        error: str,
        operation: str,
        category: ErrorCategory = ErrorCategory.INTERNAL,
        error_code: str = ErrorCodes.INTERNAL_ERROR,
        run_id: Optional[str] = None,
        context: Optional[Dict[str, Any]] = None,
        suggestion: Optional[str] = None
    ) -> ErrorReport:
        """Generic report; severity follows from the category."""
        return ErrorReport(
            error=error,
            error_code=error_code,
            category=category,
            severity=_SEVERITY[category],
            operation=operation,
            run_id=run_id,
            context=context or None,
            suggestion=suggestion,
        )

    @staticmethod
    def config_error(exc: ConfigError, operation: str, run_id: Optional[str] = None) -> ConfigErrorReport:
        """Report listing every offending config field."""
        details = [
            ErrorDetail(field=path, code=ErrorCodes.INVALID_CONFIG, message="invalid value")
            for path in exc.field_paths
        ]
        return ConfigErrorReport(
            error=exc.message,
            error_code=exc.error_code,
            operation=operation,
            run_id=run_id,
            details=details or None,
            context=exc.context or None,
            suggestion=exc.suggestion or "Check the configuration file against the documented schema"
        )

    @staticmethod
    def data_schema_error(exc: DataSchemaError, operation: str,
                          run_id: Optional[str] = None) -> DataSchemaErrorReport:
        return DataSchemaErrorReport(
            error=exc.message,
            error_code=exc.error_code,
            operation=operation,
            run_id=run_id,
            context=exc.context or None,
            suggestion=exc.suggestion or "Check that the data file was produced by 'photocal simulate'"
        )

    @staticmethod
    def internal_error(error: str, operation: str, run_id: Optional[str] = None,
                       context: Optional[Dict[str, Any]] = None) -> InternalErrorReport:
        return InternalErrorReport(
            error=error,
            error_code=ErrorCodes.INTERNAL_ERROR,
            operation=operation,
            run_id=run_id,
            context=context,
            suggestion="Re-run with PHOTOCAL_LOG=DEBUG and report the traceback"
        )

    @classmethod
    def from_exception(cls, exc: BaseException, operation: str,
                       run_id: Optional[str] = None) -> ErrorReport:
        if isinstance(exc, ConfigError):
            return cls.config_error(exc, operation, run_id)
        if isinstance(exc, DataSchemaError):
            return cls.data_schema_error(exc, operation, run_id)
        if isinstance(exc, PhotocalError):
            return cls.create_error_report(
                error=exc.message,
                operation=operation,
                category=exc.category,
                error_code=exc.error_code,
                run_id=run_id,
                context=exc.context,
                suggestion=exc.suggestion
            )
        return cls.internal_error(
            error="An unexpected error occurred",
            operation=operation,
            run_id=run_id,
            context={"exception_type": type(exc).__name__, "message": str(exc)}
        )


def exit_code_for(report: ErrorReport) -> int:
    return ERROR_CATEGORY_TO_EXIT_CODE[report.category]


def handle_cli_exception(exc: BaseException, operation: str, run_id: Optional[str] = None,
                         stream: Optional[TextIO] = None) -> int:
    """
    Log the failure, print its JSON report on stderr and return the exit code.
    """
    report = ErrorHandler.from_exception(exc, operation, run_id)
    internal = report.category == ErrorCategory.INTERNAL
    logger.error(
        f"{operation} failed: {exc}",
        extra={"run_id": run_id, "operation": operation, "error_code": report.error_code},
        exc_info=internal,
    )
    print(report.model_dump_json(exclude_none=True), file=stream or sys.stderr)
    return exit_code_for(report)
