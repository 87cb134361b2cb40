"""
Weight groups: full-precision masters paired with their quantized images.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Iterator

import numpy as np

from ..models import CellConfig, QuantizerSpec
from ..numerics import as_matrix, get_dtype
from ..quantize import quantize, in_value_set
from ..exceptions import ShapeMismatchError, ConfigurationError

logger = logging.getLogger(__name__)

# (name, role) per cell kind; input weights are (H, I), recurrent (H, H), biases (H,)
GROUP_LAYOUT: Dict[str, List[Tuple[str, str]]] = {
    "vanilla": [
        ("W_xh", "input"), ("W_hh", "recurrent"), ("b_h", "bias"),
    ],
    "gru": [
        ("W_xz", "input"), ("W_xr", "input"), ("W_xh", "input"),
        ("W_hz", "recurrent"), ("W_hr", "recurrent"), ("W_hh", "recurrent"),
        ("b_z", "bias"), ("b_r", "bias"), ("b_h", "bias"),
    ],
    "lstm": [
        ("W_xi", "input"), ("W_xf", "input"), ("W_xo", "input"), ("W_xg", "input"),
        ("W_hi", "recurrent"), ("W_hf", "recurrent"), ("W_ho", "recurrent"), ("W_hg", "recurrent"),
        ("b_i", "bias"), ("b_f", "bias"), ("b_o", "bias"), ("b_g", "bias"),
    ],
}


@dataclass
class WeightGroup:
    """A master matrix, its latest quantized image and its quantizer."""
    name: str
    role: str
    master: np.ndarray
    quantizer: Optional[QuantizerSpec] = None
    quantized: Optional[np.ndarray] = None
    version: int = 0

    def __post_init__(self):
        if self.quantized is None:
            self.quantized = self.master

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.master.shape

    @property
    def is_quantized(self) -> bool:
        return self.quantizer is not None and self.quantizer.method != "identity"

    def refresh(self, rng: Optional[np.random.Generator] = None, deterministic: bool = False) -> np.ndarray:
        """Recompute the quantized image from the master."""
        self.quantized = quantize(self.master, self.quantizer, rng, deterministic=deterministic)
        self.version += 1
        return self.quantized

    def use_master(self) -> None:
        """Alias the image to the master (full-precision evaluation)."""
        self.quantized = self.master
        self.version += 1

    def check(self) -> None:
        """Verify the image invariants."""
        if self.quantized.shape != self.master.shape:
            raise ShapeMismatchError(f"group {self.name}", self.master.shape, self.quantized.shape)
        if self.is_quantized and self.quantized is not self.master:
            if not in_value_set(self.quantized, self.quantizer).all():
                raise ConfigurationError(f"group {self.name} image left the {self.quantizer.method} value set")


@dataclass
class WeightSet:
    """Ordered collection of weight groups; iteration order is fixed."""
    groups: Dict[str, WeightGroup] = field(default_factory=dict)

    def add(self, group: WeightGroup) -> WeightGroup:
        self.groups[group.name] = group
        return group

    def __getitem__(self, name: str) -> WeightGroup:
        return self.groups[name]

    def __contains__(self, name: str) -> bool:
        return name in self.groups

    def __iter__(self) -> Iterator[WeightGroup]:
        return iter(self.groups.values())

    def __len__(self) -> int:
        return len(self.groups)

    def names(self) -> List[str]:
        return list(self.groups)

    def images(self) -> Dict[str, np.ndarray]:
        return {name: g.quantized for name, g in self.groups.items()}

    def versions(self) -> Dict[str, int]:
        return {name: g.version for name, g in self.groups.items()}

    def refresh(self, rng: Optional[np.random.Generator] = None, deterministic: bool = False) -> None:
        for group in self.groups.values():
            group.refresh(rng, deterministic=deterministic)

    def use_masters(self) -> None:
        for group in self.groups.values():
            group.use_master()

    def subset(self, names) -> "WeightSet":
        return WeightSet({name: self.groups[name] for name in names})

    def by_role(self, role: str) -> List[WeightGroup]:
        return [g for g in self.groups.values() if g.role == role]


def group_shape(role: str, input_size: int, hidden_size: int) -> Tuple[int, ...]:
    if role == "input":
        return (hidden_size, input_size)
    if role == "recurrent":
        return (hidden_size, hidden_size)
    return (hidden_size,)


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, int]) -> np.ndarray:
    """Glorot/Bengio uniform initialization for a (fan_out, fan_in) matrix."""
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_cell_weights(cfg: CellConfig, rng: np.random.Generator, init_scale: float = 0.01) -> WeightSet:
    """Initialize the cell groups of ``cfg``.

    Vanilla: recurrent matrix = identity, input matrix uniform in
    [-init_scale, init_scale]. GRU/LSTM: Glorot uniform. Biases zero except
    the LSTM forget bias, which starts at 1.
    """
    if cfg.input_size is None:
        raise ConfigurationError("cell.input_size is not set", field="cell.input_size")

    dtype = get_dtype()
    weights = WeightSet()
    for name, role in GROUP_LAYOUT[cfg.kind]:
        shape = group_shape(role, cfg.input_size, cfg.hidden_size)
        if role == "bias":
            value = np.ones(shape) if name == "b_f" else np.zeros(shape)
        elif cfg.kind == "vanilla" and role == "recurrent":
            value = np.eye(cfg.hidden_size)
        elif cfg.kind == "vanilla":
            value = rng.uniform(-init_scale, init_scale, size=shape)
        else:
            value = glorot_uniform(rng, shape)
        weights.add(WeightGroup(name, role, np.ascontiguousarray(value, dtype=dtype), cfg.quantizer_for(role)))

    logger.debug(f"Initialized {cfg.kind} cell with {len(weights)} groups")
    return weights


def build_weights(cfg: CellConfig, values: Dict[str, np.ndarray]) -> WeightSet:
    """Build a cell weight set from explicit arrays (tests, checkpoints)."""
    dtype = get_dtype()
    weights = WeightSet()
    for name, role in GROUP_LAYOUT[cfg.kind]:
        if name not in values:
            raise ConfigurationError(f"missing weight group '{name}'", field=name)
        value = as_matrix(values[name], dtype)
        expected = group_shape(role, cfg.input_size, cfg.hidden_size)
        if value.shape != expected:
            raise ShapeMismatchError(f"group {name}", expected, value.shape)
        weights.add(WeightGroup(name, role, value, cfg.quantizer_for(role)))
    return weights
