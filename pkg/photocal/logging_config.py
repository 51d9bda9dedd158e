"""
Logging configuration for the photocal tool.

Long Monte Carlo and tomography runs log one JSON object per line on stderr,
tagged with the run id and command, so traces can be matched to the
manifest written next to the outputs.
"""

import json
import logging
import sys
import uuid
from datetime import datetime, timezone
from typing import Any, Dict, Optional

# Attributes every LogRecord carries; anything else came in through `extra`.
_RECORD_ATTRS = frozenset(vars(logging.LogRecord("", 0, "", 0, "", None, None))) | {
    "message", "asctime", "taskName",
}
# Context keys promoted to top-level fields of the JSON line.
_CONTEXT_KEYS = ("tool", "run_id", "operation")

_PLAIN_FORMAT = "%(asctime)s %(levelname)-8s %(name)s: %(message)s"


class StructuredFormatter(logging.Formatter):
    """Renders a record as a single JSON line."""

    def format(self, record: logging.LogRecord) -> str:
        entry: Dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "source": f"{record.module}.{record.funcName}:{record.lineno}",
        }
        for key in _CONTEXT_KEYS:
            if key in record.__dict__:
                entry[key] = record.__dict__[key]

        extra = {
            key: value for key, value in record.__dict__.items()
            if key not in _RECORD_ATTRS and key not in _CONTEXT_KEYS
        }
        if extra:
            entry["extra"] = extra

        if record.exc_info and record.exc_info[0] is not None:
            exc_type, exc, _ = record.exc_info
            entry["exception"] = {
                "type": exc_type.__name__,
                "message": str(exc),
                "traceback": self.formatException(record.exc_info),
            }
        return json.dumps(entry, default=str, ensure_ascii=False)


class ContextAdapter(logging.LoggerAdapter):
    """Adds a fixed context (tool, run id, operation) to every record."""

    def process(self, msg, kwargs):
        kwargs["extra"] = {**kwargs.get("extra", {}), **self.extra}
        return msg, kwargs

    def bind(self, **context: Any) -> "ContextAdapter":
        """Adapter on the same logger with additional context."""
        merged = dict(self.extra)
        merged.update({k: v for k, v in context.items() if v is not None})
        return ContextAdapter(self.logger, merged)


def setup_logging(
    tool_name: str = "photocal",
    log_level: str = "WARNING",
    use_json_format: bool = True,
    enable_console: bool = True,
) -> ContextAdapter:
    """
    Configure the tool's root logger and return an adapter bound to it.

    Module loggers (``photocal.core.*``) propagate here. Handlers are replaced
    on every call, so repeated invocations in one process (tests, notebooks)
    do not duplicate lines.
    """
    level = logging.getLevelName(log_level.upper())
    if not isinstance(level, int):
        level = logging.WARNING

    logger = logging.getLogger(tool_name)
    logger.setLevel(level)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    if enable_console:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(StructuredFormatter() if use_json_format
                             else logging.Formatter(_PLAIN_FORMAT))
        logger.addHandler(handler)

    return ContextAdapter(logger, {"tool": tool_name})


def get_run_logger(tool_logger: ContextAdapter, run_id: str,
                   operation: Optional[str] = None) -> ContextAdapter:
    """Logger for one command invocation."""
    return tool_logger.bind(run_id=run_id, operation=operation)


def generate_run_id() -> str:
    return uuid.uuid4().hex


class LogMessages:
    """Canonical messages, so log lines can be grepped across runs."""

    RUN_STARTED = "Run started"
    RUN_COMPLETED = "Run completed"
    RUN_FAILED = "Run failed"

    SIMULATION_STARTED = "Simulation started"
    SIMULATION_COMPLETED = "Simulation completed"

    OUTPUT_WRITTEN = "Outputs written"
