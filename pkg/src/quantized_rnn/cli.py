"""
Command-line interface: ``qrnn train | eval | diagnose | pack | seeds``.

Progress and diagnostics go to standard error; machine-readable
``key=value`` results go to standard output. Validation failures exit with
status 2, other failures with status 1.
"""

import csv
import functools
from pathlib import Path
from typing import Any, Dict, Optional

import click
import numpy as np
import structlog
import yaml
from pydantic import ValidationError

from . import __version__
from .models import RunConfig, DiagnosticsConfig
from .numerics import set_precision
from .logging_setup import setup_logging
from .data import load_task_data
from .train import MONITORED, EVAL_MODES, fit, evaluate_metrics
from .checkpoint import load_checkpoint, restore_model
from .model import NEVER_QUANTIZED
from .diagnostics import sweep_from_config, write_traces_csv
from .quantize import quantize
from .packing import pack as pack_tensor, write_packed, payload_ratio
from .exceptions import QRNNError, ConfigurationError, DataError

log = structlog.get_logger(__name__)

EXIT_RUNTIME = 1
EXIT_VALIDATION = 2
MODE_CHOICES = {"full": ("full_precision",), "quantized": ("deterministic_quantized",), "both": EVAL_MODES}


def _format_validation(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        field = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"invalid config field '{field}': {item['msg']}")
    return "\n".join(lines)


def handle_errors(func):
    """Map validation and runtime errors to exit codes with a message on stderr."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ValidationError as e:
            click.echo(_format_validation(e), err=True)
            raise SystemExit(EXIT_VALIDATION)
        except (ConfigurationError, yaml.YAMLError) as e:
            click.echo(f"invalid config: {e}", err=True)
            raise SystemExit(EXIT_VALIDATION)
        except QRNNError as e:
            click.echo(f"error: {e}", err=True)
            raise SystemExit(EXIT_RUNTIME)
    return wrapper


def load_run_config(path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Parse a YAML run config; ``overrides`` (command-line flags) take precedence."""
    document: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                document = yaml.safe_load(handle) or {}
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e}")
        if not isinstance(document, dict):
            raise ConfigurationError(f"config {path} must be a mapping at the top level")
    for key, value in (overrides or {}).items():
        if value is not None:
            document[key] = value
    return RunConfig.model_validate(document)


def write_resolved_config(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.yaml"
    path.write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False), encoding="utf-8")
    return path


def _emit(**fields) -> None:
    click.echo(" ".join(f"{key}={value}" for key, value in fields.items()))


@click.group(name="qrnn")
@click.version_option(__version__, prog_name="qrnn")
@click.option("--log-level", default=None, help="Log level (default: QRNN_LOG_LEVEL)")
@click.option("--log-format", type=click.Choice(["console", "json"]), default=None,
              help="Log format (default: QRNN_LOG_FORMAT)")
def main(log_level: Optional[str], log_format: Optional[str]) -> None:
    """Quantized-weight recurrent networks: train, evaluate, diagnose, pack."""
    try:
        setup_logging(level=log_level, fmt=log_format)
    except ConfigurationError as e:
        click.echo(f"invalid config: {e}", err=True)
        raise SystemExit(EXIT_VALIDATION)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="YAML run config")
@click.option("--seed", type=int, default=None, help="Override the config seed")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Continue from a checkpoint")
@handle_errors
def train(config_path: str, seed: Optional[int], out: Optional[str], resume: Optional[str]) -> None:
    """Train a model; writes metrics.csv, best/last checkpoints and config.yaml."""
    cfg = load_run_config(config_path, {"seed": seed, "output_dir": out})
    set_precision(cfg.precision)
    out_dir = Path(cfg.output_dir)
    write_resolved_config(cfg, out_dir)

    data = load_task_data(cfg)
    log.info("train_start", task=cfg.task, cell=cfg.cell.kind, seed=cfg.seed, out=str(out_dir))
    result = fit(cfg, data, out_dir, resume=resume)
    _emit(**{f"best_{MONITORED[cfg.task]}": repr(result.state.best), "best_epoch": result.state.best_epoch,
             "epochs": result.epochs})


@main.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Run config for the data (default: the checkpoint's)")
@click.option("--mode", type=click.Choice(sorted(MODE_CHOICES)), default="both", show_default=True)
@click.option("--split", type=click.Choice(["train", "valid", "test"]), default="test", show_default=True)
@click.option("--seed", type=int, default=None, help="Override the data seed")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Also write eval.csv here")
@handle_errors
def eval_cmd(checkpoint: str, config_path: Optional[str], mode: str, split: str,
             seed: Optional[int], out: Optional[str]) -> None:
    """Evaluate a checkpoint in one or both eval modes."""
    ckpt = load_checkpoint(checkpoint)
    cfg = load_run_config(config_path, {"seed": seed}) if config_path else ckpt.config
    if seed is not None and not config_path:
        cfg = cfg.model_copy(update={"seed": seed})
    set_precision(cfg.precision)

    data = load_task_data(cfg)
    if (data.input_size, data.output_size) != (ckpt.input_size, ckpt.output_size):
        raise DataError(f"data sizes {(data.input_size, data.output_size)} do not match the checkpoint's "
                        f"{(ckpt.input_size, ckpt.output_size)}")
    model = restore_model(ckpt)

    rows = []
    for eval_mode in MODE_CHOICES[mode]:
        metrics = {m.kind: m.value for m in evaluate_metrics(model, data.split(split), cfg, eval_mode, split)}
        rows.append((eval_mode, metrics))
        _emit(mode=eval_mode, split=split, **{kind: repr(value) for kind, value in metrics.items()})

    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "eval.csv").open("w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["mode", "split", "metric", "value"])
            for eval_mode, metrics in rows:
                for kind, value in metrics.items():
                    writer.writerow([eval_mode, split, kind, repr(value)])


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
@handle_errors
def diagnose(config_path: str, seed: Optional[int], out: Optional[str]) -> None:
    """Write per-step spectral radius and hidden norm traces for each quantizer."""
    cfg = load_run_config(config_path, {"seed": seed, "output_dir": out})
    diag = cfg.diagnostics or DiagnosticsConfig()
    out_dir = Path(cfg.output_dir)
    write_resolved_config(cfg, out_dir)

    traces = sweep_from_config(diag, cfg.seed)
    write_traces_csv(out_dir / "stability.csv", traces)
    for trace in traces:
        write_traces_csv(out_dir / f"stability_{trace.quantizer}.csv", [trace])
        _emit(quantizer=trace.quantizer, mean_spectral_radius=repr(float(np.mean(trace.spectral_radius))),
              growth=repr(trace.growth), max_growth=repr(trace.max_growth))


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Directory for .qpkt files")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Run config whose cell.scope replaces the checkpoint's quantizers")
@handle_errors
def pack(checkpoint: str, out: str, config_path: Optional[str]) -> None:
    """Bit-pack the deterministic quantized image of every quantized group."""
    ckpt = load_checkpoint(checkpoint)
    scope_cfg = load_run_config(config_path).cell if config_path else None
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    master_bytes = payload_bytes = 0
    for name, group in ckpt.groups.items():
        packed = group.packed
        if scope_cfg is not None:
            spec = None if name in NEVER_QUANTIZED else scope_cfg.quantizer_for(group.role)
            if spec is None or spec.method == "identity":
                packed = None
            else:
                image = quantize(group.master.astype(np.float64), spec, deterministic=True)
                packed = pack_tensor(image, spec.as_deterministic())
        if packed is None:
            click.echo(f"skipping unquantized group {name}", err=True)
            continue

        write_packed(out_dir / f"{name}.qpkt", packed)
        master_bytes += packed.count * 4
        payload_bytes += len(packed.payload)
        _emit(group=name, method=packed.method, entries=packed.count, payload_bytes=len(packed.payload),
              ratio=f"{payload_ratio(packed):.2f}")

    ratio = master_bytes / payload_bytes if payload_bytes else 0.0
    _emit(total_master_bytes=master_bytes, total_payload_bytes=payload_bytes, ratio=f"{ratio:.2f}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seeds", "count", type=click.IntRange(min=1), default=3, show_default=True,
              help="Number of seeds, starting at the config seed")
@click.option("--seed", type=int, default=None, help="Override the base seed")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@handle_errors
def seeds(config_path: str, count: int, seed: Optional[int], out: Optional[str]) -> None:
    """Train one config under several seeds and summarize the best validation metric."""
    base = load_run_config(config_path, {"seed": seed, "output_dir": out})
    set_precision(base.precision)
    out_dir = Path(base.output_dir)
    kind = MONITORED[base.task]

    results = []
    for k in range(count):
        cfg = base.model_copy(update={"seed": base.seed + k, "output_dir": str(out_dir / f"seed_{base.seed + k}")})
        run_dir = Path(cfg.output_dir)
        write_resolved_config(cfg, run_dir)
        result = fit(cfg, load_task_data(cfg), run_dir)
        results.append((cfg.seed, result.state.best, result.state.best_epoch))
        _emit(seed=cfg.seed, **{f"best_{kind}": repr(result.state.best)}, best_epoch=result.state.best_epoch)

    values = np.array([best for _, best, _ in results], dtype=np.float64)
    with (out_dir / "seeds_summary.csv").open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["seed", "metric", "value", "best_epoch"])
        for run_seed, best, best_epoch in results:
            writer.writerow([run_seed, kind, repr(best), best_epoch])
        writer.writerow(["mean", kind, repr(float(values.mean())), ""])
        writer.writerow(["max", kind, repr(float(values.max())), ""])
    _emit(metric=kind, mean=repr(float(values.mean())), max=repr(float(values.max())))


if __name__ == "__main__":
    main()
