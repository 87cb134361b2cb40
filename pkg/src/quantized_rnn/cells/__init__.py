"""
Recurrent cells with per-group quantization hooks.

Every cell reads the *images* of its weight groups (the latest quantized
matrices, or the masters themselves for unquantized groups) and its
backward pass returns gradients with respect to those images.
"""

from typing import Dict, Optional

import numpy as np

from ..models import CellConfig
from .weights import WeightGroup, WeightSet, GROUP_LAYOUT, init_cell_weights, build_weights, glorot_uniform
from .trace import StateTrace
from .vanilla import vanilla_forward, vanilla_backward, vanilla_step
from .gru import gru_forward, gru_backward, gru_step
from .lstm import lstm_forward, lstm_backward, lstm_step


def forward(cfg: CellConfig, weights: WeightSet, x_seq, state0=None, mask=None,
            c0: Optional[np.ndarray] = None) -> StateTrace:
    """Dispatch to the forward pass of ``cfg.kind``."""
    if cfg.kind == "vanilla":
        trace, _ = vanilla_forward(cfg, weights, x_seq, state0, mask)
        return trace
    if cfg.kind == "gru":
        return gru_forward(cfg, weights, x_seq, state0, mask)
    return lstm_forward(cfg, weights, x_seq, state0, c0, mask)


def backward(cfg: CellConfig, weights: WeightSet, trace: StateTrace,
             grad_out: np.ndarray) -> Dict[str, np.ndarray]:
    """BPTT gradients of the cell groups given dL/dh_t for every step."""
    if cfg.kind == "vanilla":
        return vanilla_backward(cfg, weights, trace, grad_out)
    if cfg.kind == "gru":
        return gru_backward(cfg, weights, trace, grad_out)
    return lstm_backward(cfg, weights, trace, grad_out)


__all__ = [
    "WeightGroup",
    "WeightSet",
    "StateTrace",
    "GROUP_LAYOUT",
    "init_cell_weights",
    "build_weights",
    "glorot_uniform",
    "forward",
    "backward",
    "vanilla_forward",
    "vanilla_backward",
    "vanilla_step",
    "gru_forward",
    "gru_backward",
    "gru_step",
    "lstm_forward",
    "lstm_backward",
    "lstm_step",
]
