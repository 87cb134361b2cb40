"""
Vanilla recurrent cell: h_t = act(W_hh h_{t-1} + W_xh x_t + b_h).
"""

from typing import Dict, Optional, Tuple

import numpy as np

from ..models import CellConfig
from ..numerics import ACTIVATIONS, activation_grad, matmul, softmax_rows
from .weights import WeightSet
from .trace import StateTrace, prepare_inputs, check_trace, check_grad_out

NAMES = ("W_xh", "W_hh", "b_h")


def vanilla_step(params: Dict[str, np.ndarray], x_t: np.ndarray, h_prev: np.ndarray,
                 activation: str = "relu") -> Tuple[np.ndarray, np.ndarray]:
    """One step; returns (h_t, pre-activation)."""
    pre = matmul(h_prev, params["W_hh"].T) + matmul(x_t, params["W_xh"].T) + params["b_h"]
    return ACTIVATIONS[activation](pre), pre


def vanilla_forward(cfg: CellConfig, weights: WeightSet, x_seq, h0=None,
                    mask=None) -> Tuple[StateTrace, Optional[np.ndarray]]:
    """Run the cell over a sequence.

    When ``weights`` also holds the readout groups ``W_hx``/``b_x`` the
    per-step predictive distributions softmax(W_hx h_t + b_x) are returned
    too, otherwise the second element is None.
    """
    x, h0, mask = prepare_inputs(cfg, x_seq, h0, mask)
    params = weights.images()
    steps, batch, _ = x.shape

    h = np.empty((steps + 1, batch, cfg.hidden_size), dtype=x.dtype)
    pre = np.empty((steps, batch, cfg.hidden_size), dtype=x.dtype)
    out = np.empty_like(pre)
    h[0] = h0
    for t in range(steps):
        new, pre[t] = vanilla_step(params, x[t], h[t], cfg.activation)
        out[t] = new
        if mask is None:
            h[t + 1] = new
        else:
            m = mask[t][:, None]
            h[t + 1] = m * new + (1.0 - m) * h[t]

    trace = StateTrace(
        kind="vanilla", x=x, h=h, gates={"pre": pre, "out": out}, mask=mask,
        versions={name: weights[name].version for name in NAMES},
    )

    probs = None
    if "W_hx" in weights:
        logits = matmul(h[1:], params["W_hx"].T) + params["b_x"]
        probs = softmax_rows(logits)
    return trace, probs


def vanilla_backward(cfg: CellConfig, weights: WeightSet, trace: StateTrace,
                     grad_out: np.ndarray) -> Dict[str, np.ndarray]:
    """BPTT gradients with respect to the images used in the forward pass.

    Args:
        grad_out: dL/dh_t for t = 1..T, shape (T, B, H)
    """
    check_trace(trace, "vanilla", weights.versions())
    grad = check_grad_out(trace, grad_out)
    params = weights.images()
    W_hh = params["W_hh"]

    grads = {name: np.zeros_like(params[name]) for name in NAMES}
    dh_next = np.zeros_like(trace.h[0])
    pre, out = trace.gates["pre"], trace.gates["out"]

    for t in reversed(range(trace.length)):
        dh = grad[t] + dh_next
        if trace.mask is None:
            d_new, carry = dh, 0.0
        else:
            m = trace.mask[t][:, None]
            d_new, carry = dh * m, dh * (1.0 - m)
        da = d_new * activation_grad(cfg.activation, pre[t], out[t])
        grads["W_hh"] += da.T @ trace.h[t]
        grads["W_xh"] += da.T @ trace.x[t]
        grads["b_h"] += da.sum(axis=0)
        dh_next = da @ W_hh + carry

    return grads
