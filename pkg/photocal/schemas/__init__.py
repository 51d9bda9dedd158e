from .errors import (
    ErrorSeverity,
    ErrorCategory,
    ErrorDetail,
    ErrorReport,
    ConfigErrorReport,
    DataSchemaErrorReport,
    InternalErrorReport,
    ERROR_CATEGORY_TO_EXIT_CODE,
    ErrorCodes,
)

__all__ = [
    "ErrorSeverity",
    "ErrorCategory",
    "ErrorDetail",
    "ErrorReport",
    "ConfigErrorReport",
    "DataSchemaErrorReport",
    "InternalErrorReport",
    "ERROR_CATEGORY_TO_EXIT_CODE",
    "ErrorCodes",
]
