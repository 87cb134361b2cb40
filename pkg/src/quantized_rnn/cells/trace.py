"""
Per-timestep record of a forward pass.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from ..models import CellConfig
from ..numerics import get_dtype
from ..exceptions import ShapeMismatchError, TraceMismatchError


@dataclass
class StateTrace:
    """Hidden states, pre-activations and gate values of one forward pass.

    ``h[0]`` (and ``c[0]``) hold the initial state, so ``h[t]`` is the state
    after step t and ``h`` has T + 1 entries. Gate and pre-activation arrays
    have T entries indexed from step 1 at position 0.
    """
    kind: str
    x: np.ndarray
    h: np.ndarray
    gates: Dict[str, np.ndarray] = field(default_factory=dict)
    c: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    versions: Dict[str, int] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.x.shape[0]

    @property
    def hidden(self) -> np.ndarray:
        """States h_1..h_T."""
        return self.h[1:]


def prepare_inputs(cfg: CellConfig, x_seq, state0=None, mask=None) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Normalize inputs to (T, B, I), initial state to (B, H) and mask to (T, B)."""
    dtype = get_dtype()
    x = np.asarray(x_seq, dtype=dtype)
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3 or x.shape[2] != cfg.input_size:
        raise ShapeMismatchError("cell input", x.shape, ("T", "B", cfg.input_size))

    batch = x.shape[1]
    if state0 is None:
        s0 = np.zeros((batch, cfg.hidden_size), dtype=dtype)
    else:
        s0 = np.asarray(state0, dtype=dtype)
        if s0.ndim == 1:
            s0 = np.broadcast_to(s0, (batch, s0.shape[0]))
        if s0.shape != (batch, cfg.hidden_size):
            raise ShapeMismatchError("initial state", s0.shape, (batch, cfg.hidden_size))
        s0 = np.array(s0, dtype=dtype)

    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=dtype)
        if m.ndim == 1:
            m = m[:, None]
        if m.shape != x.shape[:2]:
            raise ShapeMismatchError("mask", m.shape, x.shape[:2])
    return x, s0, m


def check_trace(trace: StateTrace, kind: str, versions: Dict[str, int]) -> None:
    """Raise if ``trace`` was not produced by these weights' current images."""
    if trace.kind != kind:
        raise TraceMismatchError(f"trace of a {trace.kind} cell used with {kind} weights")
    for name, version in trace.versions.items():
        if versions.get(name) != version:
            raise TraceMismatchError(
                f"weight group '{name}' changed since the forward pass "
                f"(trace v{version}, weights v{versions.get(name)})"
            )


def check_grad_out(trace: StateTrace, grad_out: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad_out, dtype=trace.h.dtype)
    if grad.ndim == 2:
        grad = grad[:, None, :]
    if grad.shape != trace.hidden.shape:
        raise ShapeMismatchError("upstream gradient", grad.shape, trace.hidden.shape)
    return grad
