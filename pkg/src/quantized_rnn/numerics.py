"""
Dense linear algebra, activations and seeded random streams.

Matrices are numpy arrays of the run's scalar precision. Random streams use
numpy's PCG64 bit generator; every purpose (initialization, quantizer
sampling, shuffling, ...) gets its own stream derived from the master seed
through ``SeedSequence([seed, offset])`` with the offsets in ``STREAMS``.
"""

import logging

import numpy as np

from .exceptions import ShapeMismatchError, ConfigurationError

logger = logging.getLogger(__name__)

RNG_ALGORITHM = "PCG64"

# Sub-seed offsets per purpose
STREAMS = {
    "init": 1,
    "quantize": 2,
    "shuffle": 3,
    "data": 4,
    "diagnostics": 5,
    "eval": 6,
}

_DTYPES = {"float32": np.float32, "float64": np.float64}
_precision = "float32"


def set_precision(precision: str) -> None:
    """Set the global scalar precision ('float32' or 'float64')."""
    global _precision
    if precision not in _DTYPES:
        raise ConfigurationError(f"unsupported precision '{precision}'", field="precision")
    _precision = precision
    logger.debug(f"Scalar precision set to {precision}")


def get_precision() -> str:
    return _precision


def get_dtype() -> type:
    """Numpy dtype of the current run precision."""
    return _DTYPES[_precision]


def as_matrix(values, dtype=None) -> np.ndarray:
    """Convert to a contiguous array of the run precision."""
    return np.ascontiguousarray(values, dtype=dtype or get_dtype())


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Create the random stream for ``stream`` derived from ``seed``.

    Identical (seed, stream) pairs yield bit-identical sample sequences.
    """
    if stream not in STREAMS:
        raise ConfigurationError(f"unknown random stream '{stream}'", field="stream")
    sequence = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, STREAMS[stream]])
    return np.random.Generator(np.random.PCG64(sequence))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a shape check.

    Raises:
        ShapeMismatchError: If ``a.shape[-1] != b.shape[0]``.
    """
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    return np.matmul(a, b)


def hard_sigmoid(x):
    """clip((x + 1) / 2, 0, 1), element-wise."""
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(pre):
    """Derivative of relu at the pre-activation (0 at the kink)."""
    return (pre > 0).astype(pre.dtype)


def tanh(x):
    return np.tanh(x)


def sigmoid(x):
    """Logistic sigmoid in its tanh form, which cannot overflow."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def softmax_rows(x):
    """Row-wise softmax with max subtraction."""
    x = np.asarray(x)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """Derivative of an activation given its input and output."""
    if name == "relu":
        return relu_grad(pre)
    if name == "tanh":
        return 1.0 - post * post
    if name == "sigmoid":
        return post * (1.0 - post)
    raise ConfigurationError(f"unknown activation '{name}'", field="activation")
