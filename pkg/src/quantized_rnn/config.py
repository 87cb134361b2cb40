"""
Process-level settings for quantized-rnn.

Loads defaults from environment variables using python-dotenv. Run-level
settings (model sizes, quantizers, optimizer) live in YAML run configs, see
``quantized_rnn.models.RunConfig``.
"""

import os
import logging

from dotenv import load_dotenv

from .exceptions import ConfigurationError

# Load .env file if it exists
load_dotenv()

logger = logging.getLogger(__name__)

PRECISIONS = ("float32", "float64")
LOG_FORMATS = ("console", "json")


class QRNNSettings:
    """Environment-backed defaults shared by every command."""

    def __init__(self):
        """Initialize settings from environment variables."""
        self.precision = os.getenv("QRNN_PRECISION", "float32").lower()
        self.log_level = os.getenv("QRNN_LOG_LEVEL", "INFO").upper()
        self.log_format = os.getenv("QRNN_LOG_FORMAT", "console").lower()
        self.output_dir = os.getenv("QRNN_OUTPUT_DIR", "runs")
        self.power_iters = int(os.getenv("QRNN_POWER_ITERS", "200"))

        logger.debug(f"Loaded settings: precision={self.precision}, output_dir={self.output_dir}")

    def validate(self) -> None:
        """Validate settings.

        Raises:
            ConfigurationError: If a setting has an unsupported value.
        """
        if self.precision not in PRECISIONS:
            raise ConfigurationError(
                f"QRNN_PRECISION must be one of {PRECISIONS}, got '{self.precision}'",
                field="QRNN_PRECISION",
            )

        if self.log_format not in LOG_FORMATS:
            raise ConfigurationError(
                f"QRNN_LOG_FORMAT must be one of {LOG_FORMATS}, got '{self.log_format}'",
                field="QRNN_LOG_FORMAT",
            )

        if not hasattr(logging, self.log_level):
            raise ConfigurationError(f"Unknown QRNN_LOG_LEVEL '{self.log_level}'", field="QRNN_LOG_LEVEL")

        if self.power_iters < 100:
            raise ConfigurationError("QRNN_POWER_ITERS must be at least 100", field="QRNN_POWER_ITERS")

    def __repr__(self) -> str:
        """String representation of settings."""
        return (
            f"QRNNSettings("
            f"precision='{self.precision}', "
            f"log_level='{self.log_level}', "
            f"log_format='{self.log_format}', "
            f"output_dir='{self.output_dir}', "
            f"power_iters={self.power_iters})"
        )


def load_settings() -> QRNNSettings:
    """Create and validate settings from the current environment."""
    settings = QRNNSettings()
    settings.validate()
    return settings
