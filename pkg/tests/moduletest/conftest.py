"""
Shared pytest fixtures for quantized_rnn module tests.
"""

from pathlib import Path
from typing import Callable, Dict, Any

import numpy as np
import pytest
import yaml

from quantized_rnn.numerics import make_rng
from quantized_rnn.models import RunConfig


@pytest.fixture
def rng() -> np.random.Generator:
    """A seeded generator for test inputs."""
    return make_rng(1234, "data")


@pytest.fixture
def ab_corpus(tmp_path) -> Path:
    """A 1000-character 'abab...' corpus."""
    path = tmp_path / "ab.txt"
    path.write_text("ab" * 500, encoding="utf-8")
    return path


@pytest.fixture
def cycle_corpus(tmp_path) -> Path:
    """One 10-character sequence, repeated 50 times."""
    path = tmp_path / "cycle.txt"
    path.write_text("abcdefghij" * 50, encoding="utf-8")
    return path


@pytest.fixture
def text8_corpus(tmp_path) -> Path:
    """Lowercase letters and space only, every symbol present."""
    letters = "abcdefghijklmnopqrstuvwxyz "
    path = tmp_path / "text8.txt"
    path.write_text(letters * 40, encoding="utf-8")
    return path


@pytest.fixture
def lm_config(corpus_path, tmp_path) -> Callable[..., RunConfig]:
    """Build a small char-LM run config on the bundled corpus."""
    def build(**overrides) -> RunConfig:
        document: Dict[str, Any] = {
            "task": "char_lm",
            "seed": 0,
            "precision": "float64",
            "output_dir": str(tmp_path / "run"),
            "cell": {"kind": "vanilla", "hidden_size": 8, "activation": "relu"},
            "train": {"learning_rate": 0.01, "batch_size": 8, "max_epochs": 2, "patience": 2},
            "data": {"path": str(corpus_path), "seq_length": 20},
        }
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(document.get(key), dict):
                document[key] = {**document[key], **value}
            else:
                document[key] = value
        return RunConfig.model_validate(document)
    return build


@pytest.fixture
def classify_config(tmp_path) -> Callable[..., RunConfig]:
    """Build a small synthetic classification run config."""
    def build(**overrides) -> RunConfig:
        document: Dict[str, Any] = {
            "task": "seq_classify",
            "seed": 0,
            "precision": "float64",
            "output_dir": str(tmp_path / "run"),
            "cell": {"kind": "gru", "hidden_size": 6},
            "train": {"learning_rate": 0.01, "batch_size": 16, "max_epochs": 2, "patience": 2},
            "data": {
                "split_fractions": [0.6, 0.2, 0.2],
                "synthetic": {"n_per_class": 10, "classes": 3, "frames": 8, "dim": 3, "noise": 0.1},
            },
        }
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(document.get(key), dict):
                document[key] = {**document[key], **value}
            else:
                document[key] = value
        return RunConfig.model_validate(document)
    return build


@pytest.fixture
def write_config(tmp_path) -> Callable[[RunConfig, str], Path]:
    """Write a run config as YAML and return its path."""
    def write(cfg: RunConfig, name: str = "config.yaml") -> Path:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False), encoding="utf-8")
        return path
    return write
