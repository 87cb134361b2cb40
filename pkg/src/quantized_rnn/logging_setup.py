"""
Logging configuration for quantized-rnn.
"""

import sys
import logging
from typing import Optional

import structlog
from pythonjsonlogger import jsonlogger

from .config import load_settings
from .exceptions import ConfigurationError


def setup_logging(name: str = "quantized_rnn", level: Optional[str] = None,
                  fmt: Optional[str] = None) -> logging.Logger:
    """Set up structured logging on standard error.

    Args:
        name: Logger name to configure (the package logger by default)
        level: Log level, defaults to QRNN_LOG_LEVEL
        fmt: 'json' or 'console', defaults to QRNN_LOG_FORMAT

    Returns:
        The configured logger

    Raises:
        ConfigurationError: An environment setting or ``level`` is invalid.
    """
    settings = load_settings()
    log_level = (level or settings.log_level).upper()
    log_format = (fmt or settings.log_format).lower()
    if not isinstance(getattr(logging, log_level, None), int):
        raise ConfigurationError(f"unknown log level '{log_level}'", field="log_level")

    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, log_level))

    # Remove existing handlers
    logger.handlers = []

    # Progress goes to stderr, stdout is reserved for results
    handler = logging.StreamHandler(sys.stderr)

    if log_format == "json":
        formatter = jsonlogger.JsonFormatter(
            "%(asctime)s %(levelname)s %(name)s %(message)s",
            timestamp=True,
        )
    else:
        formatter = logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        )

    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.propagate = False

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.processors.JSONRenderer() if log_format == "json" else structlog.dev.ConsoleRenderer(colors=False),
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )

    return logger
