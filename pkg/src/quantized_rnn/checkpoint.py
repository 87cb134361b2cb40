"""
Training checkpoints.

File layout (little-endian)::

    magic "QRNN" | u16 version | u32 length + config JSON
    u32 group count, then per group:
        u16 length + name | u8 role tag | u8 ndim | u32 dims... | u8 dtype tag
        master values
        u8 has_packed [u32 length + PackedTensor]   deterministic quantized image
        u8 has_moments [m values, v values]         Adam moments
    u32 length + train state JSON                    step, epoch, best, stale, rng states

The config JSON holds the resolved run config plus the input and output
sizes the model was built with.
"""

import io
import json
import struct
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .models import RunConfig, ROLES
from .model import RecurrentModel, model_from_masters
from .numerics import get_dtype
from .quantize import quantize
from .packing import PackedTensor, pack
from .train import AdamMoments, TrainState
from .exceptions import CheckpointError, PackedFormatError

logger = logging.getLogger(__name__)

MAGIC = b"QRNN"
VERSION = 1

ROLE_TAGS = {role: k for k, role in enumerate(ROLES)}
DTYPE_TAGS = {"float32": 0, "float64": 1}
TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class StoredGroup:
    """One weight group as read back from a checkpoint."""
    name: str
    role: str
    master: np.ndarray
    packed: Optional[PackedTensor] = None
    moments: Optional[AdamMoments] = None


@dataclass
class Checkpoint:
    """Contents of a checkpoint file."""
    config: RunConfig
    input_size: int
    output_size: int
    groups: Dict[str, StoredGroup] = field(default_factory=dict)
    state: Dict[str, Any] = field(default_factory=dict)

    def masters(self) -> Dict[str, np.ndarray]:
        return {name: g.master for name, g in self.groups.items()}

    def train_state(self) -> TrainState:
        """Rebuild the optimizer state stored alongside the weights."""
        moments = {name: g.moments for name, g in self.groups.items() if g.moments is not None}
        return TrainState(
            moments=moments,
            step=int(self.state.get("step", 0)),
            epoch=int(self.state.get("epoch", 0)),
            best=self.state.get("best"),
            best_epoch=int(self.state.get("best_epoch", 0)),
            stale=int(self.state.get("stale", 0)),
            skipped=int(self.state.get("skipped", 0)),
            rng_states=self.state.get("rng_states", {}),
        )


def _write_bytes(out: io.BytesIO, blob: bytes, prefix: str = "<I") -> None:
    out.write(struct.pack(prefix, len(blob)))
    out.write(blob)


def _write_array(out: io.BytesIO, values: np.ndarray, dtype: np.dtype) -> None:
    out.write(np.ascontiguousarray(values, dtype=dtype).tobytes())


def save_checkpoint(path: Union[str, Path], cfg: RunConfig, model: RecurrentModel,
                    state: Optional[TrainState] = None) -> int:
    """Write ``model`` (and optionally ``state``) to ``path``; returns bytes written."""
    document = {
        "run": cfg.model_dump(mode="json"),
        "input_size": model.cell_cfg.input_size,
        "output_size": model.output_size,
    }
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", VERSION))
    _write_bytes(out, json.dumps(document, sort_keys=True).encode("utf-8"))

    out.write(struct.pack("<I", len(model.weights)))
    for group in model.weights:
        dtype_name = np.dtype(group.master.dtype).name
        if dtype_name not in DTYPE_TAGS:
            raise CheckpointError(f"group {group.name} has unsupported dtype {dtype_name}")
        dtype = TAG_DTYPES[DTYPE_TAGS[dtype_name]]

        _write_bytes(out, group.name.encode("utf-8"), "<H")
        out.write(struct.pack("<BB", ROLE_TAGS[group.role], group.master.ndim))
        out.write(struct.pack(f"<{group.master.ndim}I", *group.master.shape))
        out.write(struct.pack("<B", DTYPE_TAGS[dtype_name]))
        _write_array(out, group.master, dtype)

        if group.is_quantized:
            image = quantize(group.master, group.quantizer, deterministic=True)
            out.write(struct.pack("<B", 1))
            _write_bytes(out, pack(image, group.quantizer.as_deterministic()).to_bytes())
        else:
            out.write(struct.pack("<B", 0))

        moments = state.moments.get(group.name) if state is not None else None
        if moments is None:
            out.write(struct.pack("<B", 0))
        else:
            out.write(struct.pack("<B", 1))
            _write_array(out, moments.m, dtype)
            _write_array(out, moments.v, dtype)

    schedule = state.schedule() if state is not None else {}
    _write_bytes(out, json.dumps(schedule, sort_keys=True).encode("utf-8"))

    blob = out.getvalue()
    Path(path).write_bytes(blob)
    logger.debug(f"Saved checkpoint {path}", extra={"bytes": len(blob), "groups": len(model.weights)})
    return len(blob)


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise CheckpointError(f"{self.source} is truncated at byte {self.offset}")
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def sized(self, prefix: str = "<I") -> bytes:
        (length,) = self.unpack(prefix)
        return self.take(length)

    def array(self, shape: Tuple[int, ...], dtype: np.dtype) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint file.

    Raises:
        CheckpointError: Unreadable file, bad magic or version, truncation or malformed contents.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")

    reader = _Reader(blob, str(path))
    magic = reader.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")

    try:
        document = json.loads(reader.sized().decode("utf-8"))
        config = RunConfig.model_validate(document["run"])
        checkpoint = Checkpoint(config, int(document["input_size"]), int(document["output_size"]))
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: malformed config document: {e}")

    roles = {tag: role for role, tag in ROLE_TAGS.items()}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        name = reader.sized("<H").decode("utf-8")
        role_tag, ndim = reader.unpack("<BB")
        shape = reader.unpack(f"<{ndim}I")
        (dtype_tag,) = reader.unpack("<B")
        if role_tag not in roles or dtype_tag not in TAG_DTYPES:
            raise CheckpointError(f"{path}: group {name} has an unknown role or dtype tag")
        dtype = TAG_DTYPES[dtype_tag]
        group = StoredGroup(name, roles[role_tag], reader.array(shape, dtype))

        (has_packed,) = reader.unpack("<B")
        if has_packed:
            try:
                group.packed = PackedTensor.from_bytes(reader.sized())
            except PackedFormatError as e:
                raise CheckpointError(f"{path}: group {name}: {e.message}")
        (has_moments,) = reader.unpack("<B")
        if has_moments:
            group.moments = AdamMoments(reader.array(shape, dtype), reader.array(shape, dtype))
        checkpoint.groups[name] = group

    try:
        checkpoint.state = json.loads(reader.sized().decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path}: malformed train state: {e}")

    logger.debug(f"Loaded checkpoint {path}", extra={"groups": count})
    return checkpoint


def restore_model(checkpoint: Checkpoint) -> RecurrentModel:
    """Build the model stored in ``checkpoint``, with moments cast to the current precision."""
    model = model_from_masters(checkpoint.config, checkpoint.input_size, checkpoint.output_size,
                               checkpoint.masters())
    dtype = get_dtype()
    for stored in checkpoint.groups.values():
        if stored.moments is not None:
            stored.moments = AdamMoments(stored.moments.m.astype(dtype), stored.moments.v.astype(dtype))
    return model
