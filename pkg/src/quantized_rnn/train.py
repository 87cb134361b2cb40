"""
Straight-through training: losses, Adam on master weights, early stopping.

Each minibatch refreshes the quantized images from the masters, runs the
forward pass on the images, takes gradients with respect to the images and
applies them to the masters.
"""

import csv
import time
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import structlog

from .models import Metric, RunConfig, TrainConfig, EvalMode
from .model import RecurrentModel
from .data import Batch, LMSplit, SeqDataset, TaskData, batches
from .numerics import make_rng
from .quantize import clips_master
from .cells import WeightGroup
from .exceptions import DataError, NonFiniteGradientError, ShapeMismatchError

logger = logging.getLogger(__name__)
log = structlog.get_logger(__name__)

LN2 = float(np.log(2.0))
EVAL_MODES: Tuple[str, ...] = ("full_precision", "deterministic_quantized")
MONITORED = {"char_lm": "bpc", "seq_classify": "accuracy"}
METRICS_HEADER = ("epoch", "split", "metric", "value", "wallclock_s")

CONTINUE = "continue"
STOP = "stop"


@dataclass
class AdamMoments:
    """First and second moment estimates of one weight group."""
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, master: np.ndarray) -> "AdamMoments":
        return cls(np.zeros_like(master), np.zeros_like(master))


@dataclass
class TrainState:
    """Optimizer and schedule state carried across epochs and checkpoints."""
    moments: Dict[str, AdamMoments] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best: Optional[float] = None
    best_epoch: int = 0
    stale: int = 0
    skipped: int = 0
    improved: bool = False
    rng_states: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def fresh(cls, model: RecurrentModel) -> "TrainState":
        return cls(moments={g.name: AdamMoments.zeros_like(g.master) for g in model.weights})

    def schedule(self) -> Dict[str, Any]:
        """The scalar part of the state, as stored in checkpoints."""
        return {
            "step": self.step, "epoch": self.epoch, "best": self.best, "best_epoch": self.best_epoch,
            "stale": self.stale, "skipped": self.skipped, "rng_states": self.rng_states,
        }


@dataclass
class FitResult:
    """Outcome of a training run."""
    model: RecurrentModel
    state: TrainState
    epochs: int
    stopped_early: bool
    out_dir: Path


def bpc(nats: float) -> float:
    """Bits per character from a cross-entropy in nats."""
    return nats / LN2


def cross_entropy(p_seq: np.ndarray, targets: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood over unmasked positions and its logit gradient.

    Args:
        p_seq: Predictive distributions, shape (..., V)
        targets: Integer targets, shape (...)
        mask: 1 for positions that count, 0 for padding

    Returns:
        (loss in nats, dL/dlogits = (p - onehot) / count at unmasked positions).
        Non-finite probabilities count as the smallest positive probability,
        so the loss stays finite; the gradient is not cleaned.

    Raises:
        DataError: A target index is outside the vocabulary.
    """
    p = np.asarray(p_seq)
    targets = np.asarray(targets)
    vocab = p.shape[-1]
    if targets.shape != p.shape[:-1]:
        raise ShapeMismatchError("cross_entropy targets", targets.shape, p.shape[:-1])
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        bad = targets[(targets < 0) | (targets >= vocab)][0]
        raise DataError(f"target index {int(bad)} is outside the vocabulary of size {vocab}")

    weight = np.ones(targets.shape, dtype=p.dtype) if mask is None else np.asarray(mask, dtype=p.dtype)
    count = float(weight.sum())
    grad = np.zeros_like(p)
    if count == 0:
        return 0.0, grad

    picked = np.take_along_axis(p, targets[..., None], axis=-1)[..., 0]
    # a diverged forward pass (NaN/Inf probabilities) scores as the smallest positive probability
    picked = np.where(np.isfinite(picked), picked, 0.0)
    nll = -np.log(np.maximum(picked, np.finfo(p.dtype).tiny))
    loss = float((weight * nll).sum() / count)

    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    grad = (p - onehot) * (weight[..., None] / count)
    return loss, grad


def accuracy_count(p: np.ndarray, targets: np.ndarray) -> int:
    return int((np.argmax(p, axis=-1) == targets).sum())


def adam_step(state: TrainState, group: WeightGroup, grad: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Bias-corrected Adam update of ``group``'s master, in place.

    Uses ``state.step`` as the time step, which the caller advances once per
    minibatch. Masters of binary/ternary groups are clipped to
    ``[-cfg.master_clip, cfg.master_clip]`` afterwards. The quantized image
    is left alone until the next refresh.

    Raises:
        NonFiniteGradientError: ``grad`` holds NaN or Inf.
    """
    if grad.shape != group.master.shape:
        raise ShapeMismatchError(f"gradient of {group.name}", grad.shape, group.master.shape)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(group.name)
    if state.step < 1:
        raise ValueError("adam_step needs state.step >= 1")

    moments = state.moments.setdefault(group.name, AdamMoments.zeros_like(group.master))
    b1, b2, t = cfg.beta1, cfg.beta2, state.step
    moments.m[...] = b1 * moments.m + (1.0 - b1) * grad
    moments.v[...] = b2 * moments.v + (1.0 - b2) * grad * grad
    m_hat = moments.m / (1.0 - b1 ** t)
    v_hat = moments.v / (1.0 - b2 ** t)

    group.master -= (cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(group.master.dtype)
    if clips_master(group.quantizer):
        np.clip(group.master, -cfg.master_clip, cfg.master_clip, out=group.master)
    group.version += 1
    return group.master


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def early_stop(state: TrainState, val_metric: float, patience: int, higher_is_better: bool = False) -> str:
    """Patience rule, called once per epoch after ``state.epoch`` is set.

    An improving epoch resets the stale count. No stop happens while
    ``state.epoch <= patience``; past it, a non-improving epoch stops when
    ``patience`` stale epochs have already been counted and otherwise adds
    one to the count.
    """
    if state.best is None:
        improved = True
    elif higher_is_better:
        improved = val_metric > state.best
    else:
        improved = val_metric < state.best

    state.improved = improved
    if improved:
        state.best = val_metric
        state.best_epoch = state.epoch
        state.stale = 0
        return CONTINUE

    if state.epoch > patience:
        if state.stale >= patience:
            return STOP
        state.stale += 1
    return CONTINUE


def _batch_mask(batch: Batch) -> Optional[np.ndarray]:
    return batch.mask if batch.task == "seq_classify" else None


def _loss_mask(batch: Batch) -> Optional[np.ndarray]:
    return batch.mask if batch.task == "char_lm" else None


def _summarize(task: str, nats: float, count: float, correct: int, split: str, epoch: int,
               mode: Optional[str] = None) -> List[Metric]:
    loss = nats / count if count else 0.0
    metrics = [Metric(kind="cross_entropy", value=loss, split=split, epoch=epoch, mode=mode)]
    if task == "char_lm":
        metrics.append(Metric(kind="bpc", value=bpc(loss), split=split, epoch=epoch, mode=mode))
    else:
        metrics.append(Metric(kind="accuracy", value=correct / count if count else 0.0,
                              split=split, epoch=epoch, mode=mode))
    return metrics


def train_epoch(model: RecurrentModel, data: Union[LMSplit, SeqDataset], cfg: RunConfig, state: TrainState,
                quant_rng: np.random.Generator, shuffle_rng: Optional[np.random.Generator] = None) -> List[Metric]:
    """One pass over ``data`` with straight-through updates; returns train metrics.

    A minibatch whose forward or backward pass overflows (a diverging
    quantized recurrence) still counts towards the loss but gets no Adam
    update; ``state.skipped`` counts such batches.
    """
    train_cfg = cfg.train
    nats, count, correct = 0.0, 0.0, 0
    skipped = 0

    for batch in batches(data, train_cfg.batch_size, shuffle_rng if train_cfg.shuffle else None,
                         masking=cfg.data.masking):
        model.refresh("train", quant_rng)
        with np.errstate(over="ignore", invalid="ignore"):
            output = model.forward(batch.inputs, _batch_mask(batch))
            loss, grad = cross_entropy(output.probs, batch.targets, _loss_mask(batch))
            grads = model.backward(output, grad)
        if train_cfg.clip_gradients:
            grads, _ = clip_global_norm(grads, train_cfg.grad_clip_norm)

        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            skipped += 1
        else:
            state.step += 1
            for group in model.weights:
                adam_step(state, group, grads[group.name], train_cfg)

        n = float(batch.targets.size)
        nats += loss * n
        count += n
        if batch.task == "seq_classify":
            correct += accuracy_count(output.probs, batch.targets)

    if skipped:
        state.skipped += skipped
        log.warning("non_finite_batches", epoch=state.epoch, skipped=skipped, total_skipped=state.skipped)
    return _summarize(model.task, nats, count, correct, "train", state.epoch)


def evaluate_metrics(model: RecurrentModel, data: Union[LMSplit, SeqDataset], cfg: RunConfig,
                     mode: Optional[EvalMode] = None, split: str = "valid", epoch: int = 0) -> List[Metric]:
    """Cross-entropy and the task metric of ``data`` under an eval mode.

    Draws no random numbers: ``full_precision`` uses the masters and
    ``deterministic_quantized`` each group's deterministic variant.
    """
    mode = mode or cfg.train.eval_mode
    model.refresh(mode)
    nats, count, correct = 0.0, 0.0, 0
    for batch in batches(data, cfg.train.batch_size, None, masking=cfg.data.masking):
        with np.errstate(over="ignore", invalid="ignore"):
            output = model.forward(batch.inputs, _batch_mask(batch))
            loss, _ = cross_entropy(output.probs, batch.targets, _loss_mask(batch))
        n = float(batch.targets.size)
        nats += loss * n
        count += n
        if batch.task == "seq_classify":
            correct += accuracy_count(output.probs, batch.targets)
    return _summarize(model.task, nats, count, correct, split, epoch, mode)


def evaluate(model: RecurrentModel, data: Union[LMSplit, SeqDataset], cfg: RunConfig,
             mode: Optional[EvalMode] = None, split: str = "valid", epoch: int = 0) -> Metric:
    """The monitored metric (BPC or accuracy) of ``data`` under an eval mode."""
    return evaluate_metrics(model, data, cfg, mode, split, epoch)[-1]


class MetricsWriter:
    """Appends metric rows to ``metrics.csv``.

    Eval rows carry the eval mode in the metric name, e.g. ``bpc.full_precision``.
    """

    def __init__(self, path: Union[str, Path], append: bool = False, log_wallclock: bool = False):
        self.path = Path(path)
        self.log_wallclock = log_wallclock
        self._start = time.perf_counter()
        if not (append and self.path.exists()):
            with self.path.open("w", newline="") as handle:
                csv.writer(handle, lineterminator="\n").writerow(METRICS_HEADER)

    def write(self, metrics: List[Metric]) -> None:
        wallclock = time.perf_counter() - self._start if self.log_wallclock else 0.0
        with self.path.open("a", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            for metric in metrics:
                name = f"{metric.kind}.{metric.mode}" if metric.mode else metric.kind
                writer.writerow([metric.epoch, metric.split, name, repr(float(metric.value)), f"{wallclock:.3f}"])


def read_metrics(path: Union[str, Path]) -> List[Dict[str, str]]:
    with Path(path).open(newline="") as handle:
        return list(csv.DictReader(handle))


def fit(cfg: RunConfig, data: TaskData, out_dir: Union[str, Path],
        resume: Optional[Union[str, Path]] = None) -> FitResult:
    """Train ``cfg`` on ``data``, writing metrics and checkpoints into ``out_dir``.

    Writes ``metrics.csv``, ``best.ckpt`` (at every improvement of the
    monitored validation metric) and ``last.ckpt`` (every epoch).
    """
    from .checkpoint import load_checkpoint, save_checkpoint, restore_model

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    quant_rng = make_rng(cfg.seed, "quantize")
    shuffle_rng = make_rng(cfg.seed, "shuffle")

    if resume is not None:
        ckpt = load_checkpoint(resume)
        model = restore_model(ckpt)
        state = ckpt.train_state()
        if "quantize" in state.rng_states:
            quant_rng.bit_generator.state = state.rng_states["quantize"]
        if "shuffle" in state.rng_states:
            shuffle_rng.bit_generator.state = state.rng_states["shuffle"]
        log.info("resumed", checkpoint=str(resume), epoch=state.epoch, step=state.step)
    else:
        model = RecurrentModel.create(cfg, data.input_size, data.output_size, make_rng(cfg.seed, "init"))
        state = TrainState.fresh(model)

    writer = MetricsWriter(out / "metrics.csv", append=resume is not None, log_wallclock=cfg.train.log_wallclock)
    kind = MONITORED[cfg.task]
    higher = kind == "accuracy"
    stopped = False

    for epoch in range(state.epoch + 1, cfg.train.max_epochs + 1):
        state.epoch = epoch
        rows = train_epoch(model, data.train, cfg, state, quant_rng, shuffle_rng)

        monitored = None
        for mode in EVAL_MODES:
            measured = evaluate_metrics(model, data.valid, cfg, mode, "valid", epoch)
            rows.extend(measured)
            if mode == cfg.train.eval_mode:
                monitored = measured[-1].value

        decision = early_stop(state, monitored, cfg.train.patience, higher)
        writer.write(rows)
        state.rng_states = {"quantize": quant_rng.bit_generator.state, "shuffle": shuffle_rng.bit_generator.state}

        if state.improved:
            save_checkpoint(out / "best.ckpt", cfg, model, state)
        save_checkpoint(out / "last.ckpt", cfg, model, state)

        log.info("epoch", epoch=epoch, train_loss=rows[0].value, **{f"valid_{kind}": monitored},
                 best=state.best, stale=state.stale)
        if decision == STOP:
            stopped = True
            log.info("early_stop", epoch=epoch, best=state.best, best_epoch=state.best_epoch)
            break

    return FitResult(model, state, state.epoch, stopped, out)
