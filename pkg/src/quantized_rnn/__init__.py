"""
Quantized-weight recurrent networks

Vanilla, GRU and LSTM cells trained with binary, ternary, power-of-two and
exponential weight quantization, straight-through gradients and Adam on
full-precision master weights, plus hidden-state stability diagnostics and
bit-packed weight storage.
"""

__version__ = "0.1.0"

from .models import QuantizerSpec, CellConfig, TrainConfig, DataConfig, DiagnosticsConfig, RunConfig, Metric
from .quantize import quantize
from .packing import PackedTensor, pack, unpack
from .model import RecurrentModel
from .train import cross_entropy, adam_step, early_stop, evaluate, fit
from .diagnostics import jacobian, spectral_radius, stability_sweep
from .exceptions import (
    QRNNError,
    ShapeMismatchError,
    QuantizationValueError,
    NonFiniteGradientError,
    TraceMismatchError,
    DataError,
    CheckpointError,
    PackedFormatError,
    ConfigurationError,
    DiagnosticsError,
)

__all__ = [
    "QuantizerSpec",
    "CellConfig",
    "TrainConfig",
    "DataConfig",
    "DiagnosticsConfig",
    "RunConfig",
    "Metric",
    "quantize",
    "PackedTensor",
    "pack",
    "unpack",
    "RecurrentModel",
    "cross_entropy",
    "adam_step",
    "early_stop",
    "evaluate",
    "fit",
    "jacobian",
    "spectral_radius",
    "stability_sweep",
    "QRNNError",
    "ShapeMismatchError",
    "QuantizationValueError",
    "NonFiniteGradientError",
    "TraceMismatchError",
    "DataError",
    "CheckpointError",
    "PackedFormatError",
    "ConfigurationError",
    "DiagnosticsError",
]
