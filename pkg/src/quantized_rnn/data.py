"""
Character corpora, labeled feature-sequence datasets and batching.

On-disk sequence datasets use the QSEQ layout (little-endian)::

    magic "QSEQ" | u32 sample count | u32 feature dim
    per sample: u32 frames | u32 label | f32 features (frames x dim, row-major)

Samples are stored unpadded; loading pads them with leading zero frames to
the longest sample and builds the frame mask.
"""

import math
import struct
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .models import RunConfig, SynthConfig
from .numerics import get_dtype, make_rng
from .exceptions import DataError

logger = logging.getLogger(__name__)

SEQ_MAGIC = b"QSEQ"
SEQ_HEADER = struct.Struct("<4sII")
SAMPLE_HEADER = struct.Struct("<II")

SPLITS = ("train", "valid", "test")


@dataclass
class CharCorpus:
    """An encoded text stream split by position into train/valid/test."""
    alphabet: Dict[str, int]
    stream: np.ndarray
    boundaries: Tuple[int, int, int]
    seq_length: int

    @property
    def symbols(self) -> List[str]:
        return sorted(self.alphabet, key=self.alphabet.get)

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet)

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.array([self.alphabet[ch] for ch in text], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"symbol {e.args[0]!r} is not in the corpus alphabet")

    def decode(self, indices: Sequence[int]) -> str:
        symbols = self.symbols
        return "".join(symbols[int(i)] for i in indices)

    def span(self, split: str) -> Tuple[int, int]:
        train_end, valid_end, end = self.boundaries
        return {"train": (0, train_end), "valid": (train_end, valid_end), "test": (valid_end, end)}[split]

    def sequences(self, split: str) -> "LMSplit":
        """Length-L contiguous chunks of a split; the trailing remainder is dropped."""
        start, stop = self.span(split)
        count = (stop - start) // self.seq_length
        chunks = self.stream[start:start + count * self.seq_length].reshape(count, self.seq_length)
        return LMSplit(chunks, self.vocab_size)


@dataclass
class LMSplit:
    """Fixed-length symbol sequences of one split."""
    sequences: np.ndarray
    vocab_size: int

    def __len__(self) -> int:
        return self.sequences.shape[0]


@dataclass
class SeqDataset:
    """Labeled feature sequences, leading-zero padded to a common frame count."""
    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    label_count: int

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def frames(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> Iterator[Tuple[np.ndarray, int, np.ndarray]]:
        for k in range(len(self)):
            yield self.features[k], int(self.labels[k]), self.mask[k]

    def take(self, index: np.ndarray) -> "SeqDataset":
        return SeqDataset(self.features[index], self.labels[index], self.mask[index], self.label_count)


@dataclass
class Batch:
    """One minibatch: inputs (T, B, I), targets (T, B) or (B,), mask (T, B)."""
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    task: str

    @property
    def size(self) -> int:
        return self.inputs.shape[1]


@dataclass
class TaskData:
    """Splits and sizes of a task, ready for training."""
    task: str
    train: Union[LMSplit, SeqDataset]
    valid: Union[LMSplit, SeqDataset]
    test: Union[LMSplit, SeqDataset]
    input_size: int
    output_size: int
    corpus: Optional[CharCorpus] = None
    stats: Dict[str, np.ndarray] = field(default_factory=dict)

    def split(self, name: str):
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def shift_targets(sequence: Sequence) -> Tuple[Sequence, Sequence]:
    """Language-model pairs: 'abc' -> ('ab', 'bc')."""
    return sequence[:-1], sequence[1:]


def _split_points(total: int, fractions: Tuple[float, float, float]) -> Tuple[int, int, int]:
    train_end = int(math.floor(total * fractions[0] + 1e-9))
    valid_end = train_end + int(math.floor(total * fractions[1] + 1e-9))
    return train_end, valid_end, total


def load_char_corpus(path: Union[str, Path], fractions: Tuple[float, float, float] = (0.9, 0.05, 0.05),
                     seq_length: int = 50) -> CharCorpus:
    """Load a UTF-8 text file and split it by position.

    Raises:
        DataError: Empty file, or a split with a non-zero fraction shorter than ``seq_length``.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}")
    if not text:
        raise DataError(f"corpus {path} is empty")

    alphabet = {symbol: k for k, symbol in enumerate(sorted(set(text)))}
    stream = np.array([alphabet[ch] for ch in text], dtype=np.int64)
    boundaries = _split_points(len(stream), fractions)

    corpus = CharCorpus(alphabet, stream, boundaries, seq_length)
    for name, fraction in zip(SPLITS, fractions):
        start, stop = corpus.span(name)
        if fraction > 0 and stop - start < seq_length:
            raise DataError(f"sequence length {seq_length} exceeds the {name} split size {stop - start}")

    logger.info(f"Loaded corpus {path}", extra={
        "characters": len(stream), "alphabet": len(alphabet), "boundaries": boundaries,
    })
    return corpus


def synth_classification(n_per_class: int = 100, classes: int = 10, frames: int = 40, dim: int = 8,
                         seed: int = 0, noise: float = 1.0) -> SeqDataset:
    """Noisy sinusoid-bank sequences, one frequency/phase bank per class.

    Each sample has between frames/2 and frames real frames, preceded by
    zero padding. Its first real frame is the start of the class template,
    so the final frame depends on the sample length and the class has to be
    read from the whole utterance. Unit-amplitude sinusoids plus
    ``noise``-scaled Gaussian noise on the real frames.
    """
    if classes < 2:
        raise DataError("synth_classification needs at least 2 classes")

    rng = make_rng(seed, "data")
    templates = _draw_templates(rng, classes, frames, dim)

    total = n_per_class * classes
    labels = np.repeat(np.arange(classes), n_per_class)
    lengths = rng.integers(max(1, frames // 2), frames + 1, size=total)
    features = np.zeros((total, frames, dim))
    mask = np.zeros((total, frames))
    for k in range(total):
        start = frames - lengths[k]
        features[k, start:] = templates[labels[k], :lengths[k]] + noise * rng.standard_normal((lengths[k], dim))
        mask[k, start:] = 1.0

    order = rng.permutation(total)
    dtype = get_dtype()
    return SeqDataset(features[order].astype(dtype), labels[order], mask[order].astype(dtype), classes)


def _draw_templates(rng: np.random.Generator, classes: int, frames: int, dim: int) -> np.ndarray:
    freq = rng.uniform(1.0, max(2.0, frames / 4.0), size=(classes, dim))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(classes, dim))
    tau = np.arange(frames)  # frames counted from the utterance onset
    return np.sin(2.0 * np.pi * freq[:, None, :] * tau[None, :, None] / frames + phase[:, None, :])


def split_dataset(dataset: SeqDataset, fractions: Tuple[float, float, float]) -> Tuple[SeqDataset, SeqDataset, SeqDataset]:
    """Split by position into train/valid/test."""
    train_end, valid_end, total = _split_points(len(dataset), fractions)
    index = np.arange(total)
    return (dataset.take(index[:train_end]), dataset.take(index[train_end:valid_end]),
            dataset.take(index[valid_end:]))


def standardize(train: SeqDataset, *others: SeqDataset) -> Tuple[List[SeqDataset], Dict[str, np.ndarray]]:
    """Zero mean, unit variance per feature dimension over the train split's real frames.

    Padding frames stay zero.
    """
    real = train.mask.astype(bool)
    frames = train.features[real]
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    std = np.where(std > 0, std, 1.0)

    result = []
    for ds in (train,) + others:
        scaled = (ds.features - mean) / std
        scaled = np.where(ds.mask[..., None] > 0, scaled, 0.0).astype(ds.features.dtype)
        result.append(SeqDataset(scaled, ds.labels, ds.mask, ds.label_count))
    return result, {"mean": mean, "std": std}


def write_seq_dataset(path: Union[str, Path], dataset: SeqDataset) -> None:
    """Write a dataset in QSEQ layout (real frames only)."""
    chunks = [SEQ_HEADER.pack(SEQ_MAGIC, len(dataset), dataset.dim)]
    for features, label, mask in dataset.samples:
        real = features[mask > 0].astype("<f4")
        chunks.append(SAMPLE_HEADER.pack(real.shape[0], label))
        chunks.append(real.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_seq_dataset(path: Union[str, Path]) -> SeqDataset:
    """Read a QSEQ file, padding samples with leading zero frames."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}")
    if len(blob) < SEQ_HEADER.size:
        raise DataError(f"{path} is too short for a QSEQ header")
    magic, count, dim = SEQ_HEADER.unpack_from(blob)
    if magic != SEQ_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {SEQ_MAGIC!r}")
    if count == 0:
        raise DataError(f"{path} holds no samples")

    offset = SEQ_HEADER.size
    samples = []
    for _ in range(count):
        if offset + SAMPLE_HEADER.size > len(blob):
            raise DataError(f"{path} is truncated")
        frames, label = SAMPLE_HEADER.unpack_from(blob, offset)
        offset += SAMPLE_HEADER.size
        size = frames * dim * 4
        if offset + size > len(blob):
            raise DataError(f"{path} is truncated")
        samples.append((np.frombuffer(blob, dtype="<f4", count=frames * dim, offset=offset).reshape(frames, dim), label))
        offset += size

    longest = max(s[0].shape[0] for s in samples)
    dtype = get_dtype()
    features = np.zeros((count, longest, dim), dtype=dtype)
    mask = np.zeros((count, longest), dtype=dtype)
    labels = np.zeros(count, dtype=np.int64)
    for k, (values, label) in enumerate(samples):
        start = longest - values.shape[0]
        features[k, start:] = values
        mask[k, start:] = 1.0
        labels[k] = label
    return SeqDataset(features, labels, mask, int(labels.max()) + 1)


def batches(dataset: Union[LMSplit, SeqDataset], batch_size: int,
            rng: Optional[np.random.Generator] = None, masking: bool = True) -> Iterator[Batch]:
    """Yield minibatches; shuffled by ``rng`` when given, final partial batch kept."""
    if batch_size < 1:
        raise DataError("batch size must be at least 1")

    count = len(dataset)
    order = rng.permutation(count) if rng is not None else np.arange(count)
    dtype = get_dtype()

    for start in range(0, count, batch_size):
        index = order[start:start + batch_size]
        if isinstance(dataset, LMSplit):
            seqs = dataset.sequences[index]
            inputs, targets = shift_targets(seqs.T)
            onehot = np.eye(dataset.vocab_size, dtype=dtype)[inputs]
            yield Batch(onehot, np.ascontiguousarray(targets), np.ones(targets.shape, dtype=dtype), "char_lm")
        else:
            feats = np.ascontiguousarray(dataset.features[index].transpose(1, 0, 2))
            if masking:
                mask = np.ascontiguousarray(dataset.mask[index].T)
            else:
                mask = np.ones((dataset.frames, index.shape[0]), dtype=dtype)
            yield Batch(feats, dataset.labels[index], mask, "seq_classify")


def _synth_from_config(synth: SynthConfig, seed: int) -> SeqDataset:
    return synth_classification(synth.n_per_class, synth.classes, synth.frames, synth.dim,
                                seed=seed, noise=synth.noise)


def load_task_data(cfg: RunConfig) -> TaskData:
    """Load and split the data a run config points at."""
    data = cfg.data
    if cfg.task == "char_lm":
        if not data.path:
            raise DataError("char_lm runs need data.path")
        corpus = load_char_corpus(data.path, data.split_fractions, data.seq_length)
        return TaskData("char_lm", corpus.sequences("train"), corpus.sequences("valid"),
                        corpus.sequences("test"), corpus.vocab_size, corpus.vocab_size, corpus=corpus)

    if data.synthetic is not None:
        dataset = _synth_from_config(data.synthetic, cfg.seed)
    elif data.path:
        dataset = read_seq_dataset(data.path)
    else:
        raise DataError("seq_classify runs need data.path or data.synthetic")

    train, valid, test = split_dataset(dataset, data.split_fractions)
    stats: Dict[str, np.ndarray] = {}
    if data.standardize and len(train):
        (train, valid, test), stats = standardize(train, valid, test)
    return TaskData("seq_classify", train, valid, test, dataset.dim, dataset.label_count, stats=stats)


def class_templates(classes: int, frames: int, dim: int, seed: int) -> np.ndarray:
    """The noiseless class templates used by ``synth_classification``."""
    return _draw_templates(make_rng(seed, "data"), classes, frames, dim)
