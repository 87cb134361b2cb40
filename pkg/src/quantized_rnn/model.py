"""
Recurrent model: a cell plus its readout.

Language modeling reads out every step (softmax(W_hx h_t + b_x)); sequence
classification reads out the final state, optionally through a dense ReLU
layer (W_d, b_d) first. ``W_hx`` and ``W_d`` take the ``output`` scope
entry; ``b_x`` and ``b_d`` are never quantized.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .models import CellConfig, RunConfig, EvalMode
from .numerics import as_matrix, get_dtype, matmul, relu, relu_grad, softmax_rows
from .cells import (
    WeightGroup, WeightSet, StateTrace, init_cell_weights, build_weights, glorot_uniform, forward, backward,
)
from .exceptions import ConfigurationError, ShapeMismatchError, TraceMismatchError

logger = logging.getLogger(__name__)

READOUT_MODES = ("train", "full_precision", "deterministic_quantized")
NEVER_QUANTIZED = ("b_x", "b_d")


@dataclass
class ModelOutput:
    """Everything a backward pass needs from one forward pass."""
    trace: StateTrace
    probs: np.ndarray
    features: Optional[np.ndarray] = None
    dense_pre: Optional[np.ndarray] = None
    dense_out: Optional[np.ndarray] = None
    versions: Dict[str, int] = field(default_factory=dict)


class RecurrentModel:
    """Cell weight groups followed by readout weight groups."""

    def __init__(self, cell_cfg: CellConfig, task: str, cell: WeightSet, readout: WeightSet):
        if cell_cfg.input_size is None:
            raise ConfigurationError("cell.input_size is not set", field="cell.input_size")
        self.cell_cfg = cell_cfg
        self.task = task
        self.cell = cell
        self.readout = readout
        self.weights = WeightSet({**cell.groups, **readout.groups})

    @classmethod
    def create(cls, cfg: RunConfig, input_size: int, output_size: int,
               rng: np.random.Generator, init_scale: float = 0.01) -> "RecurrentModel":
        """Initialize a fresh model for ``cfg``; draws from ``rng`` in group order."""
        cell_cfg = cfg.cell.model_copy(update={"input_size": input_size})
        cell = init_cell_weights(cell_cfg, rng, init_scale)

        dtype = get_dtype()
        output_spec = cell_cfg.quantizer_for("output")
        hidden = cell_cfg.hidden_size

        def matrix(shape):
            if cell_cfg.kind == "vanilla":
                return rng.uniform(-init_scale, init_scale, size=shape).astype(dtype)
            return glorot_uniform(rng, shape).astype(dtype)

        readout = WeightSet()
        if cfg.task == "seq_classify" and cfg.readout_hidden:
            readout.add(WeightGroup("W_d", "output", glorot_uniform(rng, (cfg.readout_hidden, hidden)).astype(dtype),
                                    output_spec))
            readout.add(WeightGroup("b_d", "output", np.zeros(cfg.readout_hidden, dtype=dtype)))
            hidden = cfg.readout_hidden
        readout.add(WeightGroup("W_hx", "output", matrix((output_size, hidden)), output_spec))
        readout.add(WeightGroup("b_x", "output", np.zeros(output_size, dtype=dtype)))

        logger.info(f"Created {cell_cfg.kind} model", extra={
            "task": cfg.task, "hidden_size": cell_cfg.hidden_size,
            "input_size": input_size, "output_size": output_size,
        })
        return cls(cell_cfg, cfg.task, cell, readout)

    @property
    def output_size(self) -> int:
        return self.readout["b_x"].shape[0]

    @property
    def has_dense(self) -> bool:
        return "W_d" in self.readout

    def refresh(self, mode: str = "train", rng: Optional[np.random.Generator] = None) -> None:
        """Recompute every group's image for ``mode``.

        ``train`` samples stochastic quantizers from ``rng``;
        ``full_precision`` uses the masters; ``deterministic_quantized``
        applies each quantizer's deterministic variant and draws nothing.
        """
        if mode == "train":
            self.weights.refresh(rng)
        elif mode == "full_precision":
            self.weights.use_masters()
        elif mode == "deterministic_quantized":
            self.weights.refresh(None, deterministic=True)
        else:
            raise ConfigurationError(f"unknown refresh mode '{mode}', expected one of {READOUT_MODES}")

    def set_eval_mode(self, mode: EvalMode) -> None:
        self.refresh(mode)

    def forward(self, inputs: np.ndarray, mask: Optional[np.ndarray] = None) -> ModelOutput:
        """Run the cell and the readout over a (T, B, I) batch."""
        trace = forward(self.cell_cfg, self.cell, inputs, mask=mask)
        params = self.readout.images()
        versions = self.readout.versions()

        if self.task == "char_lm":
            logits = matmul(trace.hidden, params["W_hx"].T) + params["b_x"]
            return ModelOutput(trace, softmax_rows(logits), versions=versions)

        # masked frames carry the state, so h_T is the state at the last real frame
        features = trace.h[-1]
        if self.has_dense:
            dense_pre = matmul(features, params["W_d"].T) + params["b_d"]
            dense_out = relu(dense_pre)
            logits = matmul(dense_out, params["W_hx"].T) + params["b_x"]
            return ModelOutput(trace, softmax_rows(logits), features, dense_pre, dense_out, versions)

        logits = matmul(features, params["W_hx"].T) + params["b_x"]
        return ModelOutput(trace, softmax_rows(logits), features, versions=versions)

    def backward(self, output: ModelOutput, grad_logits: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of every group's image given dL/dlogits."""
        if output.probs.shape != np.shape(grad_logits):
            raise ShapeMismatchError("logit gradient", np.shape(grad_logits), output.probs.shape)
        for name, version in output.versions.items():
            if self.readout[name].version != version:
                raise TraceMismatchError(f"readout group '{name}' changed since the forward pass")

        params = self.readout.images()
        trace = output.trace
        grads: Dict[str, np.ndarray] = {}

        if self.task == "char_lm":
            grads["W_hx"] = np.einsum("tbv,tbh->vh", grad_logits, trace.hidden)
            grads["b_x"] = grad_logits.sum(axis=(0, 1))
            grad_out = grad_logits @ params["W_hx"]
        else:
            top = output.dense_out if self.has_dense else output.features
            grads["W_hx"] = grad_logits.T @ top
            grads["b_x"] = grad_logits.sum(axis=0)
            d_top = grad_logits @ params["W_hx"]
            if self.has_dense:
                d_pre = d_top * relu_grad(output.dense_pre)
                grads["W_d"] = d_pre.T @ output.features
                grads["b_d"] = d_pre.sum(axis=0)
                d_top = d_pre @ params["W_d"]
            grad_out = np.zeros_like(trace.hidden)
            grad_out[-1] = d_top

        grads.update(backward(self.cell_cfg, self.cell, trace, grad_out))
        return {name: grads[name] for name in self.weights.names()}


def model_from_masters(cfg: RunConfig, input_size: int, output_size: int,
                       masters: Dict[str, np.ndarray]) -> RecurrentModel:
    """Rebuild a model of ``cfg`` from stored master arrays."""
    cell_cfg = cfg.cell.model_copy(update={"input_size": input_size})
    cell = build_weights(cell_cfg, masters)

    dtype = get_dtype()
    output_spec = cell_cfg.quantizer_for("output")
    readout = WeightSet()
    names = ["W_d", "b_d", "W_hx", "b_x"] if cfg.task == "seq_classify" and cfg.readout_hidden else ["W_hx", "b_x"]
    for name in names:
        if name not in masters:
            raise ConfigurationError(f"missing weight group '{name}'", field=name)
        value = as_matrix(masters[name], dtype)
        readout.add(WeightGroup(name, "output", value, output_spec if name.startswith("W") else None))

    if readout["b_x"].shape != (output_size,):
        raise ShapeMismatchError("group b_x", (output_size,), readout["b_x"].shape)
    return RecurrentModel(cell_cfg, cfg.task, cell, readout)
