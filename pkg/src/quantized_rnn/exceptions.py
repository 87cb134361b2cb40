"""
Custom exceptions for quantized-rnn.
"""

from typing import Optional, Dict, Any, Tuple


class QRNNError(Exception):
    """Base exception for all quantized-rnn errors."""

    code: Optional[str] = None

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        """Initialize error.

        Args:
            message: Error message
            details: Structured context for logs and diagnostics
        """
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def __str__(self) -> str:
        """String representation of error."""
        if self.code:
            return f"[{self.code}] {self.message}"
        return self.message


class ShapeMismatchError(QRNNError):
    """Operands of an operation have incompatible shapes."""

    code = "shape"

    def __init__(self, operation: str, *shapes: Tuple[int, ...]):
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{operation}: incompatible shapes {rendered}", {"shapes": [tuple(s) for s in shapes]})
        self.operation = operation
        self.shapes = [tuple(s) for s in shapes]


class QuantizationValueError(QRNNError):
    """A value lies outside the allowed value set of a quantizer."""

    code = "value-set"

    def __init__(self, method: str, index: Tuple[int, ...], value: float):
        super().__init__(
            f"entry {tuple(index)} = {value!r} is not in the {method} value set",
            {"method": method, "index": tuple(index), "value": value},
        )
        self.method = method
        self.index = tuple(index)
        self.value = value


class NonFiniteGradientError(QRNNError):
    """A gradient contains NaN or Inf."""

    code = "gradient"

    def __init__(self, group: str):
        super().__init__(f"non-finite gradient for weight group '{group}'", {"group": group})
        self.group = group


class TraceMismatchError(QRNNError):
    """A state trace does not belong to the weights it is used with."""

    code = "trace"


class DataError(QRNNError):
    """Dataset could not be loaded or is inconsistent."""

    code = "data"


class CheckpointError(QRNNError):
    """Checkpoint file is unreadable or corrupt."""

    code = "checkpoint"


class PackedFormatError(CheckpointError):
    """Packed tensor container is unreadable or corrupt."""

    code = "packed"


class ConfigurationError(QRNNError):
    """Configuration is invalid."""

    code = "config"

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message, {"field": field} if field else None)
        self.field = field


class DiagnosticsError(QRNNError):
    """Diagnostics request is not computable."""

    code = "diagnostics"
