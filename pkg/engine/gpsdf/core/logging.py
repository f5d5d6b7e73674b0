import functools
import json
import logging
import logging.config
import sys
import time
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from datetime import datetime
from datetime import timezone as _timezone
from typing import Any, ParamSpec, TypeVar

from .config import settings

UTC = _timezone.utc  # datetime.UTC alias (3.11+)

P = ParamSpec("P")
R = TypeVar("R")

# Extra attributes copied from a LogRecord into the JSON payload
_EXTRA_FIELDS = ("frame", "operation", "gaussians", "path", "status", "error")


class JSONFormatter(logging.Formatter):
    """Custom JSON formatter for structured logging"""

    def format(self, record: logging.LogRecord) -> str:
        log_entry: dict[str, Any] = {
            "timestamp": datetime.now(UTC).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        for field in _EXTRA_FIELDS:
            if hasattr(record, field):
                log_entry[field] = getattr(record, field)

        if hasattr(record, "duration"):
            log_entry["duration_ms"] = record.duration

        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)

        if record.stack_info:
            log_entry["stack_info"] = self.formatStack(record.stack_info)

        return json.dumps(log_entry, ensure_ascii=False, default=str)


def setup_logging() -> None:
    """Setup structured logging configuration"""
    level = "DEBUG" if settings.DEBUG else settings.LOG_LEVEL.upper()

    handlers: dict[str, dict[str, Any]] = {
        "console": {
            "class": "logging.StreamHandler",
            "level": level,
            "formatter": "standard" if settings.DEBUG else "json",
            "stream": sys.stderr,
        },
    }
    engine_handlers = ["console"]

    if settings.LOG_DIR is not None:
        settings.LOG_DIR.mkdir(exist_ok=True, parents=True)
        handlers["file"] = {
            "class": "logging.handlers.RotatingFileHandler",
            "level": "INFO",
            "formatter": "json",
            "filename": str(settings.LOG_DIR / "gpsdf.log"),
            "maxBytes": 10485760,  # 10MB
            "backupCount": 5,
        }
        handlers["error_file"] = {
            "class": "logging.handlers.RotatingFileHandler",
            "level": "ERROR",
            "formatter": "json",
            "filename": str(settings.LOG_DIR / "error.log"),
            "maxBytes": 10485760,  # 10MB
            "backupCount": 5,
        }
        engine_handlers += ["file", "error_file"]

    logging_config = {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "json": {
                "()": JSONFormatter,
            },
            "standard": {"format": "%(asctime)s [%(levelname)s] %(name)s: %(message)s"},
        },
        "handlers": handlers,
        "loggers": {
            "gpsdf": {
                "level": level,
                "handlers": engine_handlers,
                "propagate": False,
            },
            "PIL": {
                "level": "WARNING",
                "handlers": ["console"],
                "propagate": False,
            },
        },
        "root": {
            "level": "WARNING",
            "handlers": ["console"],
        },
    }

    logging.config.dictConfig(logging_config)


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance with the given name"""
    if name == "gpsdf" or name.startswith("gpsdf."):
        return logging.getLogger(name)
    return logging.getLogger(f"gpsdf.{name}")


class LoggerMixin:
    """Mixin class to add logging capabilities to any class"""

    @property
    def logger(self) -> logging.Logger:
        return get_logger(self.__class__.__name__)


class Stopwatch:
    """Elapsed wall time of a `timed` block, in milliseconds."""

    def __init__(self) -> None:
        self.ms = 0.0


@contextmanager
def timed() -> Iterator[Stopwatch]:
    """Measure the wall time of a block.

    Usage:
        with timed() as sw:
            volume.integrate(frame, pose)
        record.fuse_ms = sw.ms
    """
    watch = Stopwatch()
    start = time.perf_counter()
    try:
        yield watch
    finally:
        watch.ms = (time.perf_counter() - start) * 1000.0


# Performance logging decorator
def log_performance(operation: str) -> Callable[[Callable[P, R]], Callable[P, R]]:
    """Decorator to log operation performance"""

    def decorator(func: Callable[P, R]) -> Callable[P, R]:
        @functools.wraps(func)
        def wrapper(*args: P.args, **kwargs: P.kwargs) -> R:
            logger = get_logger("performance")
            start_time = time.perf_counter()

            try:
                result = func(*args, **kwargs)
                duration = (time.perf_counter() - start_time) * 1000
                logger.info(
                    "Operation completed successfully",
                    extra={
                        "operation": operation,
                        "duration": duration,
                        "status": "success",
                    },
                )
                return result
            except Exception as e:
                duration = (time.perf_counter() - start_time) * 1000
                logger.error(
                    f"Operation failed: {str(e)}",
                    extra={
                        "operation": operation,
                        "duration": duration,
                        "status": "error",
                        "error": str(e),
                    },
                )
                raise

        return wrapper

    return decorator
