"""Shared domain types, validation and serialization.

Matrices are time-major (frame index first) float32. Binary files use a
small self-describing container; configs and manifests are JSON.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"HFCVP1"
MEL_BINS = 80
EMBEDDING_DIM = 192


def seed_material(*parts) -> tuple:
    """Integer entropy for numpy SeedSequence from mixed int/str parts.

    Strings map through sha256 so the stream depends only on the values,
    never on interpreter hash randomization."""
    out = []
    for p in parts:
        if isinstance(p, (int, np.integer)):
            out.append(int(p) & 0xFFFFFFFFFFFFFFFF)
        else:
            digest = hashlib.sha256(str(p).encode()).digest()
            out.append(int.from_bytes(digest[:8], "little"))
    return tuple(out)


class DimensionError(ValueError):
    """Operands disagree on a dimension that must match."""


class RangeError(ValueError):
    """A scalar argument is outside its documented range."""


def _as_f32(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float32)
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# binary matrix container


def save_matrix(path, arr: np.ndarray) -> None:
    """Write a float32 array: magic, ndim and dims as little-endian u64, row-major data."""
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<Q", d))
        f.write(arr.astype("<f4", copy=False).tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (ndim,) = struct.unpack("<Q", f.read(8))
        shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(f.read(count * 4), dtype="<f4", count=count)
    return data.reshape(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """T x 80 log-mel feature matrix, the input/output speech representation."""

    frames: np.ndarray
    sample_rate_hz: int = 22050

    def __post_init__(self):
        object.__setattr__(self, "frames", _as_f32(self.frames))

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class HiddenRepresentation:
    """T x 80 latent matrix produced by the hider; frame count matches its source."""

    frames: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "frames", _as_f32(self.frames))

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class SpeakerLabel:
    """Training-time speaker identity: an index into the dataset's class set."""

    class_index: int


@dataclass(frozen=True, eq=False)
class TrueClassIndicator:
    """One-hot target vector for the finder."""

    onehot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "onehot", _as_f32(self.onehot))


@dataclass(frozen=True, eq=False)
class ClassDistribution:
    """Probability vector over the C speaker classes, as predicted by the finder."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _as_f32(self.probs))


@dataclass(frozen=True, eq=False)
class ClassPrior:
    """Empirical class distribution with the label counts it came from."""

    probs: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        counts = np.ascontiguousarray(np.asarray(self.counts, dtype=np.int64))
        counts.setflags(write=False)
        p = np.ascontiguousarray(self.probs)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "counts", counts)


@dataclass(frozen=True, eq=False)
class SpeakerEmbedding:
    """192-d vector conditioning the combiner; the inference-time control input."""

    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vector", _as_f32(self.vector))


@dataclass
class TrainConfig:
    beta: float = 0.065
    lr_generator: float = 2e-4
    lr_finder: float = 1e-4
    decay_gamma: float = 0.999
    decay_start_epoch: int = 100
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    loss_regime: str = "mse"  # "mse" or "kl"
    finder_steps_per_generator_step: int = 1
    grad_clip: float = 1.0
    checkpoint_every: int = 10

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    type_name: str
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _check_finite(report, arr, what):
    if not np.all(np.isfinite(arr)):
        report.violations.append(f"non-finite entry in {what}")


def validate(value) -> ValidationReport:
    """Check every invariant of a domain value; returns a report instead of raising."""
    report = ValidationReport(type(value).__name__)
    v = report.violations

    if isinstance(value, MelSpectrogram) or isinstance(value, HiddenRepresentation):
        m = value.frames
        if m.ndim != 2:
            v.append(f"frames must be 2-D, got ndim={m.ndim}")
            return report
        if m.shape[1] != MEL_BINS:
            v.append(f"feature dimension must be {MEL_BINS}, got {m.shape[1]}")
        if m.shape[0] < 1:
            v.append("frame count must be >= 1")
        _check_finite(report, m, "frames")

    elif isinstance(value, SpeakerLabel):
        if value.class_index < 0:
            v.append(f"class_index must be >= 0, got {value.class_index}")

    elif isinstance(value, TrueClassIndicator):
        o = value.onehot
        if not np.all(np.isin(o, (0.0, 1.0))):
            v.append("entries must be 0 or 1")
        if o.sum() != 1.0:
            v.append(f"sum != 1 (got {o.sum()})")

    elif isinstance(value, ClassDistribution):
        p = value.probs
        _check_finite(report, p, "probs")
        if np.any(p < 0):
            v.append("negative entry")
        if report.ok and abs(float(p.sum(dtype=np.float64)) - 1.0) > 1e-6:
            v.append(f"sum != 1 (got {float(p.sum(dtype=np.float64)):.8f})")

    elif isinstance(value, ClassPrior):
        p = value.probs
        _check_finite(report, p, "probs")
        if np.any(p < 0):
            v.append("negative entry")
        if report.ok and abs(float(p.sum()) - 1.0) > 1e-9:
            v.append(f"sum != 1 (got {float(p.sum()):.12f})")
        if np.any(value.counts < 0):
            v.append("negative count")
        if len(p) != len(value.counts):
            v.append("probs/counts length mismatch")

    elif isinstance(value, SpeakerEmbedding):
        e = value.vector
        if e.ndim != 1 or e.shape[0] != EMBEDDING_DIM:
            v.append(f"dimension must be exactly {EMBEDDING_DIM}, got shape {e.shape}")
        _check_finite(report, e, "vector")

    elif isinstance(value, TrainConfig):
        c = value
        if c.beta < 0:
            v.append("beta must be >= 0")
        if c.lr_generator <= 0:
            v.append("lr_generator must be > 0")
        if c.lr_finder <= 0:
            v.append("lr_finder must be > 0")
        if not (0 < c.decay_gamma <= 1):
            v.append("decay_gamma must be in (0, 1]")
        if c.decay_start_epoch < 0:
            v.append("decay_start_epoch must be >= 0")
        if c.epochs < 1:
            v.append("epochs must be >= 1")
        if c.batch_size < 1:
            v.append("batch_size must be >= 1")
        if c.loss_regime not in ("mse", "kl"):
            v.append(f"loss_regime must be 'mse' or 'kl', got {c.loss_regime!r}")
        if c.finder_steps_per_generator_step < 1:
            v.append("finder_steps_per_generator_step must be >= 1")
    else:
        v.append(f"no validator for type {type(value).__name__}")

    return report


def onehot(label: SpeakerLabel | int, num_classes: int) -> TrueClassIndicator:
    """One-hot indicator of a speaker label over num_classes classes."""
    idx = label.class_index if isinstance(label, SpeakerLabel) else int(label)
    if not 0 <= idx < num_classes:
        raise RangeError(f"label {idx} out of range [0, {num_classes})")
    vec = np.zeros(num_classes, dtype=np.float32)
    vec[idx] = 1.0
    return TrueClassIndicator(vec)


# ---------------------------------------------------------------------------
# JSON helpers


def save_json(path, obj: dict) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path) -> dict:
    with open(path) as f:
        return json.load(f)
