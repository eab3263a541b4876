"""
Logging for EgoFlow.

structlog events share one processor chain. The console sink is a
stderr RichHandler with key=value rendering, and the optional file sink
writes one JSON object per line. Python warnings (numpy floating point
warnings included) are routed through the same handlers.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import structlog
from rich.console import Console
from rich.logging import RichHandler

from .config import config

SHARED_PROCESSORS: List[Any] = [
    structlog.stdlib.add_logger_name,
    structlog.stdlib.add_log_level,
    structlog.processors.TimeStamper(fmt="iso"),
    structlog.processors.StackInfoRenderer(),
    structlog.processors.format_exc_info,
]

# Attributes carried by EgoFlow errors that locate the offending input
ERROR_LOCATORS = ("path", "line_number", "bundle", "member")


def _formatter(renderer: Any) -> structlog.stdlib.ProcessorFormatter:
    return structlog.stdlib.ProcessorFormatter(
        processors=[structlog.stdlib.ProcessorFormatter.remove_processors_meta, renderer],
        foreign_pre_chain=SHARED_PROCESSORS,
    )


def setup_logging(
    log_level: Optional[str] = None,
    log_to_file: Optional[bool] = None,
    log_file_path: Optional[str] = None
) -> None:
    """
    Configure structlog and the root handlers.

    Calling it again replaces the handlers, so the CLI can raise or lower
    the level after import.

    Args:
        log_level: DEBUG, INFO, WARNING, ERROR or CRITICAL
        log_to_file: Add the JSON-lines file sink
        log_file_path: Where the file sink writes
    """
    log_level = log_level or config.log_level
    log_to_file = config.log_to_file if log_to_file is None else log_to_file
    log_file_path = log_file_path or config.log_file_path
    level = getattr(logging, log_level.upper(), logging.INFO)

    structlog.configure(
        processors=[structlog.stdlib.filter_by_level, *SHARED_PROCESSORS,
                    structlog.stdlib.ProcessorFormatter.wrap_for_formatter],
        wrapper_class=structlog.stdlib.BoundLogger,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=False,
    )

    root = logging.getLogger()
    root.setLevel(level)
    for handler in root.handlers[:]:
        root.removeHandler(handler)

    # stdout belongs to command output
    console = RichHandler(console=Console(stderr=True), show_time=False, show_path=False, markup=False)
    console.setFormatter(_formatter(structlog.dev.ConsoleRenderer(colors=False)))
    console.setLevel(level)
    root.addHandler(console)

    if log_to_file:
        try:
            Path(log_file_path).parent.mkdir(parents=True, exist_ok=True)
            sink = logging.FileHandler(log_file_path, encoding="utf-8")
        except OSError as e:
            root.warning("File logging unavailable (%s); console only", e)
        else:
            sink.setFormatter(_formatter(structlog.processors.JSONRenderer()))
            sink.setLevel(level)
            root.addHandler(sink)

    logging.captureWarnings(True)
    get_logger(__name__).debug("Logging configured", level=log_level,
                               log_file=log_file_path if log_to_file else None)


def get_logger(name: str) -> structlog.stdlib.BoundLogger:
    """Structured logger bound to a module name."""
    return structlog.get_logger(name)


def log_error(error: Exception, context: Optional[Dict[str, Any]] = None) -> None:
    """
    Log a failed command with the error's input location.

    File and bundle errors expose where the bad input is (path, line
    number, bundle member); those attributes become event fields.
    """
    fields: Dict[str, Any] = {"error_type": type(error).__name__, "error_message": str(error)}
    for name in ERROR_LOCATORS:
        value = getattr(error, name, None)
        if value is not None:
            fields[name] = value
    if context:
        fields.update(context)
    get_logger(__name__).error("Command failed", **fields)


def log_performance_metric(
    metric_name: str,
    value: float,
    unit: str,
    tags: Optional[Dict[str, str]] = None
) -> None:
    """Log one timing or throughput value, e.g. ("factor_duration", 0.41, "seconds")."""
    get_logger(__name__).info("Performance metric", metric=metric_name, value=round(value, 6),
                              unit=unit, **(tags or {}))


if not logging.getLogger().handlers:
    setup_logging()
