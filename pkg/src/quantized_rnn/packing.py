"""
Bit-packed storage of quantized weight matrices.

Container layout (little-endian)::

    magic "QPKT" | u8 version | u8 method tag | u8 code width | u8 flags
    u32 rows | u32 cols | f32 scale | i8 e_min | i8 e_max
    [f64 low, f64 high]            only when FLAG_BINARY_PAIR is set
    packed codes, LSB-first within each byte, padded to a byte boundary

FLAG_VECTOR marks a 1-D tensor stored as a single row; unpack gives it back as a vector.

Codes per method:

- binary: 1 bit, 0 -> low (-1), 1 -> high (+1)
- ternary / pow2ternary (clamped): 2 bits, 00 -> 0, 01 -> +scale, 10 -> -scale
- pow2ternary (unclamped, FLAG_FIXED_POINT): bit 0 sign, bits 1.. magnitude in units of scale
- expquant: bit 0 sign, bits 1.. exponent code; 0 is exact zero, e -> e - e_min + 1
"""

import math
import struct
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .models import QuantizerSpec
from .numerics import get_dtype
from .quantize import in_value_set
from .exceptions import QuantizationValueError, PackedFormatError, ConfigurationError

logger = logging.getLogger(__name__)

MAGIC = b"QPKT"
VERSION = 1
HEADER = struct.Struct("<4sBBBBIIfbb")
PAIR = struct.Struct("<dd")

METHOD_TAGS = {"binary": 0, "ternary": 1, "pow2ternary": 2, "expquant": 3}
TAG_METHODS = {tag: method for method, tag in METHOD_TAGS.items()}

FLAG_FIXED_POINT = 0x01
FLAG_BINARY_PAIR = 0x02
FLAG_VECTOR = 0x04


@dataclass(frozen=True)
class PackedTensor:
    """A quantized matrix stored as fixed-width codes."""
    method: str
    shape: Tuple[int, int]
    width: int
    payload: bytes
    flags: int = 0
    scale: float = 1.0
    e_min: int = 0
    e_max: int = 0
    binary_values: Tuple[float, float] = (-1.0, 1.0)

    @property
    def count(self) -> int:
        return self.shape[0] * self.shape[1]

    def to_bytes(self) -> bytes:
        header = HEADER.pack(MAGIC, VERSION, METHOD_TAGS[self.method], self.width, self.flags,
                             self.shape[0], self.shape[1], self.scale, self.e_min, self.e_max)
        if self.flags & FLAG_BINARY_PAIR:
            header += PAIR.pack(*self.binary_values)
        return header + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PackedTensor":
        if len(blob) < HEADER.size:
            raise PackedFormatError("packed tensor truncated before end of header")
        magic, version, tag, width, flags, rows, cols, scale, e_min, e_max = HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise PackedFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise PackedFormatError(f"unsupported packed tensor version {version}")
        if tag not in TAG_METHODS:
            raise PackedFormatError(f"unknown method tag {tag}")

        offset = HEADER.size
        pair = (-1.0, 1.0)
        if flags & FLAG_BINARY_PAIR:
            pair = PAIR.unpack_from(blob, offset)
            offset += PAIR.size

        expected = math.ceil(rows * cols * width / 8)
        payload = blob[offset:offset + expected]
        if len(payload) != expected:
            raise PackedFormatError(f"payload has {len(payload)} bytes, expected {expected}")

        return cls(method=TAG_METHODS[tag], shape=(rows, cols), width=width, payload=payload,
                   flags=flags, scale=scale, e_min=e_min, e_max=e_max, binary_values=tuple(pair))


def _as_2d(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    if q.ndim == 1:
        return q.reshape(1, -1)
    if q.ndim != 2:
        raise ConfigurationError(f"only vectors and matrices can be packed, got ndim={q.ndim}")
    return q


def _pack_codes(codes: np.ndarray, width: int) -> bytes:
    codes = codes.astype(np.uint64).ravel()
    shifts = np.arange(width, dtype=np.uint64)
    bits = ((codes[:, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def _unpack_codes(payload: bytes, count: int, width: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    bits = bits[:count * width].reshape(count, width).astype(np.uint64)
    shifts = np.arange(width, dtype=np.uint64)
    return (bits << shifts).sum(axis=1)


def _exponent_bits(e_min: int, e_max: int) -> int:
    return max(1, math.ceil(math.log2(e_max - e_min + 2)))


def _signed_codes(q: np.ndarray, magnitudes: np.ndarray) -> np.ndarray:
    return (q < 0).astype(np.uint64) | (magnitudes.astype(np.uint64) << np.uint64(1))


def pack(q: np.ndarray, spec: QuantizerSpec) -> PackedTensor:
    """Encode a quantized matrix.

    Raises:
        QuantizationValueError: An entry lies outside the value set of ``spec``.
    """
    if spec.method == "identity":
        raise ConfigurationError("identity-quantized groups are stored unpacked", field="method")

    q2 = _as_2d(q).astype(np.float64)
    rank = FLAG_VECTOR if np.asarray(q).ndim == 1 else 0
    valid = in_value_set(q2, spec)
    if not valid.all():
        bad = tuple(int(i) for i in np.argwhere(~valid)[0])
        index = bad if np.asarray(q).ndim == 2 else (bad[1],)
        raise QuantizationValueError(spec.method, index, float(q2[bad]))

    flat = q2.ravel()
    shape = (q2.shape[0], q2.shape[1])

    if spec.method == "binary":
        low, high = spec.binary_values
        flags = (FLAG_BINARY_PAIR if (low, high) != (-1.0, 1.0) else 0) | rank
        codes = (flat == high).astype(np.uint64)
        return PackedTensor("binary", shape, 1, _pack_codes(codes, 1), flags=flags,
                            binary_values=(float(low), float(high)))

    if spec.method in ("ternary", "pow2ternary"):
        scale = 1.0 if spec.method == "ternary" else 2.0 ** (-spec.f)
        if spec.method == "pow2ternary" and not spec.ternary_clamp:
            width = spec.m + spec.f + 2
            magnitudes = np.round(np.abs(flat) / scale)
            codes = _signed_codes(flat, magnitudes)
            return PackedTensor("pow2ternary", shape, width, _pack_codes(codes, width),
                                flags=FLAG_FIXED_POINT | rank, scale=scale)
        codes = np.where(flat > 0, 1, np.where(flat < 0, 2, 0)).astype(np.uint64)
        return PackedTensor(spec.method, shape, 2, _pack_codes(codes, 2), flags=rank, scale=scale)

    if spec.method == "expquant":
        k = _exponent_bits(spec.e_min, spec.e_max)
        _, exponent = np.frexp(np.abs(flat))
        exp_codes = np.where(flat == 0, 0, exponent - 1 - spec.e_min + 1)
        codes = _signed_codes(flat, exp_codes)
        return PackedTensor("expquant", shape, 1 + k, _pack_codes(codes, 1 + k),
                            flags=rank, e_min=spec.e_min, e_max=spec.e_max)

    raise ConfigurationError(f"unknown quantizer method '{spec.method}'", field="method")


def unpack(packed: PackedTensor, dtype=None) -> np.ndarray:
    """Decode a packed tensor into a (rows, cols) matrix, or a vector when one was packed."""
    dtype = dtype or get_dtype()
    codes = _unpack_codes(packed.payload, packed.count, packed.width)

    if packed.method == "binary":
        low, high = packed.binary_values
        values = np.where(codes == 1, high, low)

    elif packed.method in ("ternary", "pow2ternary") and not packed.flags & FLAG_FIXED_POINT:
        if np.any(codes == 3):
            raise PackedFormatError("reserved ternary code 11 in payload")
        values = np.where(codes == 1, packed.scale, np.where(codes == 2, -packed.scale, 0.0))

    elif packed.method == "pow2ternary":
        sign = np.where(codes & np.uint64(1), -1.0, 1.0)
        values = sign * (codes >> np.uint64(1)).astype(np.float64) * packed.scale

    elif packed.method == "expquant":
        sign = np.where(codes & np.uint64(1), -1.0, 1.0)
        exp_codes = (codes >> np.uint64(1)).astype(np.int64)
        values = np.where(exp_codes == 0, 0.0, sign * np.ldexp(1.0, exp_codes - 1 + packed.e_min))

    else:
        raise PackedFormatError(f"unknown packed method '{packed.method}'")

    shape = (packed.count,) if packed.flags & FLAG_VECTOR else packed.shape
    return values.reshape(shape).astype(dtype)


def write_packed(path: Union[str, Path], packed: PackedTensor) -> int:
    """Write a packed tensor container, returning the number of bytes written."""
    blob = packed.to_bytes()
    Path(path).write_bytes(blob)
    logger.debug(f"Wrote {len(blob)} bytes to {path}")
    return len(blob)


def read_packed(path: Union[str, Path]) -> PackedTensor:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise PackedFormatError(f"cannot read {path}: {e}")
    return PackedTensor.from_bytes(blob)


def payload_ratio(packed: PackedTensor, master_bytes_per_entry: int = 4) -> float:
    """Size of float masters divided by the packed payload size."""
    return packed.count * master_bytes_per_entry / max(1, len(packed.payload))


def spec_for(packed: PackedTensor) -> Optional[QuantizerSpec]:
    """Reconstruct a deterministic spec describing a packed tensor's value set."""
    if packed.method == "binary":
        return QuantizerSpec(method="binary", variant="deterministic", binary_values=packed.binary_values)
    if packed.method == "ternary":
        return QuantizerSpec(method="ternary", variant="deterministic")
    if packed.method == "pow2ternary":
        f = int(round(-math.log2(packed.scale)))
        if packed.flags & FLAG_FIXED_POINT:
            return QuantizerSpec(method="pow2ternary", m=packed.width - f - 2, f=f, ternary_clamp=False)
        return QuantizerSpec(method="pow2ternary", f=f)
    if packed.method == "expquant":
        return QuantizerSpec(method="expquant", variant="deterministic", e_min=packed.e_min, e_max=packed.e_max)
    return None
