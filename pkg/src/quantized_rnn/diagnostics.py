"""
Hidden-state stability diagnostics.

For each quantizer applied to the recurrent matrices, run the cell on a
random input sequence and record, per step, the largest singular value of
the state-to-state Jacobian dh_t/dh_{t-1} and the hidden-state norm.
Everything here runs in float64: binary recurrent matrices make the state
grow geometrically.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .models import CellConfig, DiagnosticsConfig, QuantizerSpec
from .numerics import make_rng
from .quantize import quantize
from .cells import StateTrace, GROUP_LAYOUT, init_cell_weights, vanilla_step, gru_step, lstm_step
from .exceptions import DiagnosticsError, ShapeMismatchError

logger = logging.getLogger(__name__)

TRACE_HEADER = ("step", "quantizer", "spectral_radius", "hidden_norm")
SPECTRAL_METHODS = ("power", "svd", "eig")


@dataclass
class DiagnosticsTrace:
    """Per-step spectral radius and hidden norm under one quantizer."""
    quantizer: str
    spectral_radius: np.ndarray
    hidden_norm: np.ndarray

    def __post_init__(self):
        if self.spectral_radius.shape != self.hidden_norm.shape:
            raise ShapeMismatchError("diagnostics trace", self.spectral_radius.shape, self.hidden_norm.shape)

    def __len__(self) -> int:
        return self.spectral_radius.shape[0]

    @property
    def growth(self) -> float:
        """||h_T|| / ||h_1||."""
        return float(self.hidden_norm[-1] / self.hidden_norm[0])

    @property
    def max_growth(self) -> float:
        """max_t ||h_t|| / ||h_1||."""
        return float(self.hidden_norm.max() / self.hidden_norm[0])


def quantizer_label(spec: Optional[QuantizerSpec]) -> str:
    return "none" if spec is None else spec.label


def _diag_rows(d: np.ndarray, m: np.ndarray) -> np.ndarray:
    """diag(d) @ m without building diag(d)."""
    return d[:, None] * m


def step_jacobian(kind: str, params: Dict[str, np.ndarray], gates: Dict[str, np.ndarray],
                  h_prev: np.ndarray, c_prev: Optional[np.ndarray] = None,
                  activation: str = "relu") -> np.ndarray:
    """dh_t/dh_{t-1} of one sample from the step's gate values.

    LSTM Jacobians hold the cell state c_{t-1} fixed.
    """
    if kind == "vanilla":
        if activation == "relu":
            slope = (gates["pre"] > 0).astype(np.float64)
        else:
            slope = 1.0 - gates["out"] ** 2
        return _diag_rows(slope, params["W_hh"])

    if kind == "gru":
        z, r, cand = gates["z"], gates["r"], gates["cand"]
        dz = _diag_rows(z * (1.0 - z), params["W_hz"])
        reset = np.diag(r) + _diag_rows(h_prev * r * (1.0 - r), params["W_hr"])
        dcand = _diag_rows(1.0 - cand ** 2, params["W_hh"] @ reset)
        return np.diag(z) + _diag_rows(h_prev - cand, dz) + _diag_rows(1.0 - z, dcand)

    if kind == "lstm":
        i, f, o, g, tc = (gates[k] for k in ("i", "f", "o", "g", "tc"))
        dc = (_diag_rows(c_prev * f * (1.0 - f), params["W_hf"])
              + _diag_rows(g * i * (1.0 - i), params["W_hi"])
              + _diag_rows(i * (1.0 - g ** 2), params["W_hg"]))
        return _diag_rows(tc * o * (1.0 - o), params["W_ho"]) + _diag_rows(o * (1.0 - tc ** 2), dc)

    raise DiagnosticsError(f"unknown cell kind '{kind}'")


def jacobian(kind: str, trace: StateTrace, t: int, params: Dict[str, np.ndarray],
             activation: str = "relu", sample: int = 0) -> np.ndarray:
    """Exact dh_t/dh_{t-1} at step ``t`` (1-based) of a forward trace.

    ``params`` are the images the forward pass used. A masked step carries
    the state, so its Jacobian is the identity.

    Raises:
        DiagnosticsError: ``t`` is 0 or past the end of the trace.
    """
    if t < 1:
        raise DiagnosticsError("the Jacobian at t=0 is undefined: there is no predecessor state")
    if t > trace.length:
        raise DiagnosticsError(f"step {t} is past the end of a trace of length {trace.length}")
    if trace.kind != kind:
        raise DiagnosticsError(f"trace of a {trace.kind} cell used as {kind}")

    hidden = trace.h.shape[2]
    if trace.mask is not None and trace.mask[t - 1, sample] == 0:
        return np.eye(hidden)

    gates = {key: np.asarray(value[t - 1, sample], dtype=np.float64) for key, value in trace.gates.items()}
    c_prev = None if trace.c is None else np.asarray(trace.c[t - 1, sample], dtype=np.float64)
    params64 = {name: np.asarray(value, dtype=np.float64) for name, value in params.items()}
    return step_jacobian(kind, params64, gates, np.asarray(trace.h[t - 1, sample], dtype=np.float64),
                         c_prev, activation)


def spectral_radius(J: np.ndarray, iters: int = 200, rng: Optional[np.random.Generator] = None,
                    method: str = "power") -> float:
    """Largest singular value of a square matrix.

    ``power`` runs power iteration on J^T J; ``svd`` is the dense largest
    singular value and ``eig`` the dense largest eigenvalue magnitude.

    Raises:
        DiagnosticsError: ``J`` is not square, or an unknown method.
    """
    J = np.asarray(J, dtype=np.float64)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise DiagnosticsError(f"spectral radius needs a square matrix, got shape {J.shape}")
    if method == "svd":
        return float(np.linalg.norm(J, 2))
    if method == "eig":
        return float(np.max(np.abs(np.linalg.eigvals(J))))
    if method != "power":
        raise DiagnosticsError(f"unknown spectral radius method '{method}', expected one of {SPECTRAL_METHODS}")

    rng = rng if rng is not None else make_rng(0, "diagnostics")
    gram = J.T @ J
    v = rng.standard_normal(J.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0 or not np.isfinite(norm):
            break
        v = w / norm
    return float(np.sqrt(max(float(v @ (gram @ v)), 0.0)))


def _sweep_cell(cfg: DiagnosticsConfig) -> CellConfig:
    return CellConfig(kind=cfg.kind, input_size=cfg.input_size, hidden_size=cfg.hidden_size,
                      activation=cfg.activation)


def stability_sweep(cfg: DiagnosticsConfig, seed: int = 0,
                    masters: Optional[Dict[str, np.ndarray]] = None) -> List[DiagnosticsTrace]:
    """Trace spectral radius and hidden norm per step for every quantizer in ``cfg``.

    The cell is freshly initialized from ``seed`` unless ``masters`` are
    given. Quantizers apply to the recurrent groups only; each quantizer
    sees the same inputs and owns its own quantization stream. Images are
    resampled every step unless ``cfg.hold_fixed`` is set.
    """
    cell_cfg = _sweep_cell(cfg)
    if masters is None:
        weights = init_cell_weights(cell_cfg, make_rng(seed, "init"))
        masters = {g.name: g.master for g in weights}
    masters = {name: np.asarray(value, dtype=np.float64) for name, value in masters.items()}
    recurrent = [name for name, role in GROUP_LAYOUT[cfg.kind] if role == "recurrent"]

    inputs = make_rng(seed, "diagnostics").standard_normal((cfg.steps, 1, cfg.input_size)) * cfg.input_scale
    traces = []
    for spec in cfg.quantizers:
        label = quantizer_label(spec)
        quant_rng = make_rng(seed, "quantize")
        params = dict(masters)

        def sample():
            for name in recurrent:
                params[name] = quantize(masters[name], spec, quant_rng)

        h = np.full((1, cfg.hidden_size), cfg.h0_value, dtype=np.float64)
        c = np.zeros_like(h)
        radius = np.empty(cfg.steps)
        norms = np.empty(cfg.steps)
        if cfg.hold_fixed:
            sample()
        for t in range(cfg.steps):
            if not cfg.hold_fixed:
                sample()
            h_prev, c_prev = h, c
            if cfg.kind == "vanilla":
                h, pre = vanilla_step(params, inputs[t], h_prev, cfg.activation)
                gates = {"pre": pre, "out": h}
            elif cfg.kind == "gru":
                h, gates = gru_step(params, inputs[t], h_prev)
            else:
                h, c, gates = lstm_step(params, inputs[t], h_prev, c_prev)
            J = step_jacobian(cfg.kind, params, {k: v[0] for k, v in gates.items()}, h_prev[0],
                              c_prev[0], cfg.activation)
            radius[t] = spectral_radius(J, cfg.power_iters)
            norms[t] = np.linalg.norm(h[0])

        trace = DiagnosticsTrace(label, radius, norms)
        logger.info(f"Swept {label}", extra={
            "quantizer": label, "mean_radius": float(radius.mean()), "final_norm": float(norms[-1]),
        })
        traces.append(trace)
    return traces


def sweep_from_config(cfg: DiagnosticsConfig, seed: int = 0) -> List[DiagnosticsTrace]:
    """Run ``stability_sweep``, taking the cell from ``cfg.checkpoint`` when set."""
    if not cfg.checkpoint:
        return stability_sweep(cfg, seed)

    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(cfg.checkpoint)
    cell = ckpt.config.cell
    cfg = cfg.model_copy(update={
        "kind": cell.kind, "hidden_size": cell.hidden_size, "activation": cell.activation,
        "input_size": ckpt.input_size,
    })
    names = [name for name, _ in GROUP_LAYOUT[cell.kind]]
    return stability_sweep(cfg, seed, {name: ckpt.groups[name].master for name in names})


def write_traces_csv(path: Union[str, Path], traces: List[DiagnosticsTrace]) -> None:
    """Write traces as step,quantizer,spectral_radius,hidden_norm rows (steps from 1)."""
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for trace in traces:
            for t in range(len(trace)):
                writer.writerow([t + 1, trace.quantizer, repr(float(trace.spectral_radius[t])),
                                 repr(float(trace.hidden_norm[t]))])
