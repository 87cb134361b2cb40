"""
Gated recurrent unit.

    z_t = sigmoid(W_xz x_t + W_hz s_{t-1} + b_z)
    r_t = sigmoid(W_xr x_t + W_hr s_{t-1} + b_r)
    h_t = tanh(W_xh x_t + W_hh (s_{t-1} * r_t) + b_h)
    s_t = (1 - z_t) * h_t + z_t * s_{t-1}
"""

from typing import Dict, Tuple

import numpy as np

from ..models import CellConfig
from ..numerics import matmul, sigmoid
from .weights import WeightSet
from .trace import StateTrace, prepare_inputs, check_trace, check_grad_out

NAMES = ("W_xz", "W_xr", "W_xh", "W_hz", "W_hr", "W_hh", "b_z", "b_r", "b_h")


def gru_step(params: Dict[str, np.ndarray], x_t: np.ndarray, s_prev: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """One step; returns (s_t, gate values)."""
    z = sigmoid(matmul(x_t, params["W_xz"].T) + matmul(s_prev, params["W_hz"].T) + params["b_z"])
    r = sigmoid(matmul(x_t, params["W_xr"].T) + matmul(s_prev, params["W_hr"].T) + params["b_r"])
    cand = np.tanh(matmul(x_t, params["W_xh"].T) + matmul(s_prev * r, params["W_hh"].T) + params["b_h"])
    s = (1.0 - z) * cand + z * s_prev
    return s, {"z": z, "r": r, "cand": cand}


def gru_forward(cfg: CellConfig, weights: WeightSet, x_seq, s0=None, mask=None) -> StateTrace:
    x, s0, mask = prepare_inputs(cfg, x_seq, s0, mask)
    params = weights.images()
    steps, batch, _ = x.shape

    s = np.empty((steps + 1, batch, cfg.hidden_size), dtype=x.dtype)
    gates = {key: np.empty((steps, batch, cfg.hidden_size), dtype=x.dtype) for key in ("z", "r", "cand")}
    s[0] = s0
    for t in range(steps):
        new, values = gru_step(params, x[t], s[t])
        for key, value in values.items():
            gates[key][t] = value
        if mask is None:
            s[t + 1] = new
        else:
            m = mask[t][:, None]
            s[t + 1] = m * new + (1.0 - m) * s[t]

    return StateTrace(kind="gru", x=x, h=s, gates=gates, mask=mask,
                      versions={name: weights[name].version for name in NAMES})


def gru_backward(cfg: CellConfig, weights: WeightSet, trace: StateTrace,
                 grad_out: np.ndarray) -> Dict[str, np.ndarray]:
    check_trace(trace, "gru", weights.versions())
    grad = check_grad_out(trace, grad_out)
    p = weights.images()

    grads = {name: np.zeros_like(p[name]) for name in NAMES}
    ds_next = np.zeros_like(trace.h[0])
    z_all, r_all, cand_all = trace.gates["z"], trace.gates["r"], trace.gates["cand"]

    for t in reversed(range(trace.length)):
        x_t, s_prev = trace.x[t], trace.h[t]
        z, r, cand = z_all[t], r_all[t], cand_all[t]

        ds = grad[t] + ds_next
        if trace.mask is None:
            d_new, carry = ds, 0.0
        else:
            m = trace.mask[t][:, None]
            d_new, carry = ds * m, ds * (1.0 - m)

        d_cand = d_new * (1.0 - z)
        dz = d_new * (s_prev - cand)
        ds_prev = d_new * z

        da_h = d_cand * (1.0 - cand * cand)
        gated = s_prev * r
        grads["W_xh"] += da_h.T @ x_t
        grads["W_hh"] += da_h.T @ gated
        grads["b_h"] += da_h.sum(axis=0)
        d_gated = da_h @ p["W_hh"]
        dr = d_gated * s_prev
        ds_prev += d_gated * r

        da_z = dz * z * (1.0 - z)
        grads["W_xz"] += da_z.T @ x_t
        grads["W_hz"] += da_z.T @ s_prev
        grads["b_z"] += da_z.sum(axis=0)
        ds_prev += da_z @ p["W_hz"]

        da_r = dr * r * (1.0 - r)
        grads["W_xr"] += da_r.T @ x_t
        grads["W_hr"] += da_r.T @ s_prev
        grads["b_r"] += da_r.sum(axis=0)
        ds_prev += da_r @ p["W_hr"]

        ds_next = ds_prev + carry

    return grads
