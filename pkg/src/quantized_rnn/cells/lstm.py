"""
Long short-term memory cell without peepholes.

    i, f, o = sigmoid(W_x* x_t + W_h* h_{t-1} + b_*)
    g = tanh(W_xg x_t + W_hg h_{t-1} + b_g)
    c_t = f * c_{t-1} + i * g
    h_t = o * tanh(c_t)
"""

from typing import Dict, Tuple

import numpy as np

from ..models import CellConfig
from ..numerics import get_dtype, matmul, sigmoid
from ..exceptions import ShapeMismatchError
from .weights import WeightSet
from .trace import StateTrace, prepare_inputs, check_trace, check_grad_out

NAMES = ("W_xi", "W_xf", "W_xo", "W_xg", "W_hi", "W_hf", "W_ho", "W_hg", "b_i", "b_f", "b_o", "b_g")
GATES = ("i", "f", "o", "g")


def lstm_step(params: Dict[str, np.ndarray], x_t: np.ndarray, h_prev: np.ndarray,
              c_prev: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """One step; returns (h_t, c_t, gate values)."""
    def affine(k):
        return matmul(x_t, params[f"W_x{k}"].T) + matmul(h_prev, params[f"W_h{k}"].T) + params[f"b_{k}"]

    i = sigmoid(affine("i"))
    f = sigmoid(affine("f"))
    o = sigmoid(affine("o"))
    g = np.tanh(affine("g"))
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return o * tc, c, {"i": i, "f": f, "o": o, "g": g, "tc": tc}


def lstm_forward(cfg: CellConfig, weights: WeightSet, x_seq, h0=None, c0=None, mask=None) -> StateTrace:
    x, h0, mask = prepare_inputs(cfg, x_seq, h0, mask)
    params = weights.images()
    steps, batch, _ = x.shape

    if c0 is None:
        c0 = np.zeros((batch, cfg.hidden_size), dtype=x.dtype)
    else:
        c0 = np.asarray(c0, dtype=get_dtype())
        if c0.ndim == 1:
            c0 = np.broadcast_to(c0, (batch, c0.shape[0]))
        if c0.shape != (batch, cfg.hidden_size):
            raise ShapeMismatchError("initial cell state", c0.shape, (batch, cfg.hidden_size))

    h = np.empty((steps + 1, batch, cfg.hidden_size), dtype=x.dtype)
    c = np.empty_like(h)
    gates = {key: np.empty((steps, batch, cfg.hidden_size), dtype=x.dtype) for key in GATES + ("tc",)}
    h[0], c[0] = h0, c0
    for t in range(steps):
        h_new, c_new, values = lstm_step(params, x[t], h[t], c[t])
        for key, value in values.items():
            gates[key][t] = value
        if mask is None:
            h[t + 1], c[t + 1] = h_new, c_new
        else:
            m = mask[t][:, None]
            h[t + 1] = m * h_new + (1.0 - m) * h[t]
            c[t + 1] = m * c_new + (1.0 - m) * c[t]

    return StateTrace(kind="lstm", x=x, h=h, c=c, gates=gates, mask=mask,
                      versions={name: weights[name].version for name in NAMES})


def lstm_backward(cfg: CellConfig, weights: WeightSet, trace: StateTrace,
                  grad_out: np.ndarray) -> Dict[str, np.ndarray]:
    check_trace(trace, "lstm", weights.versions())
    grad = check_grad_out(trace, grad_out)
    p = weights.images()

    grads = {name: np.zeros_like(p[name]) for name in NAMES}
    dh_next = np.zeros_like(trace.h[0])
    dc_next = np.zeros_like(trace.h[0])

    for t in reversed(range(trace.length)):
        x_t, h_prev, c_prev = trace.x[t], trace.h[t], trace.c[t]
        i, f, o, g, tc = (trace.gates[k][t] for k in ("i", "f", "o", "g", "tc"))

        dh = grad[t] + dh_next
        dc = dc_next
        if trace.mask is None:
            dh_new, dc_in, h_carry, c_carry = dh, dc, 0.0, 0.0
        else:
            m = trace.mask[t][:, None]
            dh_new, dc_in = dh * m, dc * m
            h_carry, c_carry = dh * (1.0 - m), dc * (1.0 - m)

        dc_new = dc_in + dh_new * o * (1.0 - tc * tc)
        pre_grads = {
            "i": dc_new * g * i * (1.0 - i),
            "f": dc_new * c_prev * f * (1.0 - f),
            "o": dh_new * tc * o * (1.0 - o),
            "g": dc_new * i * (1.0 - g * g),
        }

        dh_prev = np.zeros_like(h_prev)
        for k in GATES:
            da = pre_grads[k]
            grads[f"W_x{k}"] += da.T @ x_t
            grads[f"W_h{k}"] += da.T @ h_prev
            grads[f"b_{k}"] += da.sum(axis=0)
            dh_prev += da @ p[f"W_h{k}"]

        dh_next = dh_prev + h_carry
        dc_next = dc_new * f + c_carry

    return grads
