"""Dataset ingestion: mel extraction, the synthetic toy corpus, class priors,
speaker-embedding providers and mask-aware batching.

Dataset directory layout: manifest.json at the root, features/<utt_id>.bin
holding one T x 80 matrix each, optional embeddings/<utt_id>.bin or
embeddings/spk_<speaker>.bin with 192-d vectors.
"""

from __future__ import annotations

import dataclasses
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import (
    EMBEDDING_DIM,
    MEL_BINS,
    ClassPrior,
    MelSpectrogram,
    load_json,
    load_matrix,
    save_json,
    save_matrix,
    seed_material,
)


class DataError(ValueError):
    """Dataset contents violate a documented expectation."""


class RateError(DataError):
    """Audio sample rate differs from the configured rate; no implicit resampling."""


# ---------------------------------------------------------------------------
# mel extraction


@dataclass
class MelConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop_length: int = 256
    win_length: int = 1024
    n_mels: int = MEL_BINS
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown MelConfig keys: {sorted(unknown)}")
        return cls(**d)


def hz_to_mel(freq) -> np.ndarray:
    """Perceptual scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(freq, dtype=np.float64)
    mel = f / (200.0 / 3.0)
    logstep = np.log(6.4) / 27.0
    above = f >= 1000.0
    with np.errstate(divide="ignore", invalid="ignore"):
        log_mel = 15.0 + np.log(np.maximum(f, 1e-12) / 1000.0) / logstep
    return np.where(above, log_mel, mel)


def mel_to_hz(mel) -> np.ndarray:
    m = np.asarray(mel, dtype=np.float64)
    logstep = np.log(6.4) / 27.0
    return np.where(m >= 15.0, 1000.0 * np.exp(logstep * (m - 15.0)), m * (200.0 / 3.0))


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters on the mel scale, area-normalized, (n_mels, n_fft//2+1)."""
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2.0, cfg.n_fft // 2 + 1)
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    weights = np.zeros((cfg.n_mels, len(fft_freqs)))
    for i in range(cfg.n_mels):
        lo, center, hi = pts[i], pts[i + 1], pts[i + 2]
        up = (fft_freqs - lo) / (center - lo)
        down = (hi - fft_freqs) / (hi - center)
        weights[i] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    return weights


def compute_mel(samples, sample_rate: int, cfg: MelConfig | None = None) -> MelSpectrogram:
    """Log-mel magnitude spectrogram of mono audio.

    Frames are centered: the signal is reflection-padded by n_fft//2 on both
    sides, giving T = 1 + floor(samples / hop) frames.
    """
    cfg = cfg or MelConfig()
    if sample_rate != cfg.sample_rate:
        raise RateError(f"expected {cfg.sample_rate} Hz audio, got {sample_rate} Hz")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise DataError(f"expected mono audio, got shape {x.shape}")
    pad = cfg.n_fft // 2
    mode = "reflect" if len(x) > pad else "constant"
    xp = np.pad(x, pad, mode=mode)
    n_frames = 1 + (len(xp) - cfg.n_fft) // cfg.hop_length
    if n_frames < 1:
        raise DataError(f"audio too short for a single frame ({len(x)} samples)")
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(cfg.win_length) / cfg.win_length)
    frames = xp[idx] * window
    mag = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1))
    mel = mag @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(frames=logmel.astype(np.float32), sample_rate_hz=sample_rate)


def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit PCM mono WAV to float samples in [-1, 1]."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise DataError(f"{path}: expected mono, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise DataError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


# ---------------------------------------------------------------------------
# manifest


@dataclass
class UtteranceRecord:
    utt_id: str
    path: str  # relative to the dataset root
    speaker: int
    frames: int


@dataclass
class DatasetManifest:
    records: list
    num_classes: int
    class_counts: list
    feature_config: dict = field(default_factory=lambda: MelConfig().to_dict())

    def validate(self) -> list:
        problems = []
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for r in self.records:
            if not 0 <= r.speaker < self.num_classes:
                problems.append(f"{r.utt_id}: speaker {r.speaker} out of range")
            else:
                counts[r.speaker] += 1
        if list(counts) != list(self.class_counts):
            problems.append("class_counts inconsistent with records")
        return problems

    def labels(self) -> list:
        return [r.speaker for r in self.records]

    def to_dict(self) -> dict:
        return {
            "records": [dataclasses.asdict(r) for r in self.records],
            "num_classes": self.num_classes,
            "class_counts": list(map(int, self.class_counts)),
            "feature_config": self.feature_config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            records=[UtteranceRecord(**r) for r in d["records"]],
            num_classes=d["num_classes"],
            class_counts=d["class_counts"],
            feature_config=d.get("feature_config", MelConfig().to_dict()),
        )


def save_manifest(manifest: DatasetManifest, root) -> None:
    save_json(Path(root) / "manifest.json", manifest.to_dict())


def load_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"no dataset manifest at {path}")
    manifest = DatasetManifest.from_dict(load_json(path))
    problems = manifest.validate()
    if problems:
        raise DataError(f"invalid manifest {path}: " + "; ".join(problems))
    return manifest


def load_features(manifest: DatasetManifest, root) -> dict:
    """All feature matrices keyed by utterance id."""
    root = Path(root)
    out = {}
    for r in manifest.records:
        arr = load_matrix(root / r.path)
        if arr.ndim != 2 or arr.shape[1] != MEL_BINS:
            raise DataError(f"{r.utt_id}: bad feature shape {arr.shape}")
        out[r.utt_id] = arr
    return out


# ---------------------------------------------------------------------------
# class prior


def estimate_prior(labels, num_classes: int, mode: str = "normalize") -> ClassPrior:
    """Empirical class distribution from training labels.

    mode="normalize" divides label counts by the total; mode="softmax"
    applies a literal softmax to the raw counts (kept for comparison, it
    saturates for any realistically sized dataset).
    """
    labels = [l.class_index if hasattr(l, "class_index") else int(l) for l in labels]
    if len(labels) == 0:
        raise DataError("cannot estimate a prior from an empty dataset")
    arr = np.asarray(labels, dtype=np.int64)
    if arr.min() < 0 or arr.max() >= num_classes:
        raise DataError(f"label outside [0, {num_classes})")
    counts = np.bincount(arr, minlength=num_classes).astype(np.int64)
    if mode == "normalize":
        probs = counts.astype(np.float64) / counts.sum()
    elif mode == "softmax":
        shifted = counts.astype(np.float64) - counts.max()
        e = np.exp(shifted)
        probs = e / e.sum()
    else:
        raise ValueError(f"unknown prior mode {mode!r}")
    return ClassPrior(probs=probs, counts=counts)


# ---------------------------------------------------------------------------
# toy corpus


@dataclass
class ToyCorpusConfig:
    num_classes: int = 8
    utterances_per_class: int = 100
    min_frames: int = 40
    max_frames: int = 120
    content_noise: float = 0.1
    seed: int = 0
    # per-class generative parameters; derived from the class index if None
    tilts: list | None = None
    bump_centers: list | None = None
    energies: list | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("toy corpus needs at least 2 classes")
        if self.min_frames < 1 or self.max_frames < self.min_frames:
            raise ValueError("bad frame-count range")
        k = np.arange(self.num_classes)
        if self.tilts is None:
            self.tilts = list(0.3 * ((k % 4) / 1.5 - 1.0))
        if self.bump_centers is None:
            self.bump_centers = list(10.0 + 60.0 * k / max(1, self.num_classes - 1))
        if self.energies is None:
            self.energies = list(0.1 * ((k % 3) - 1.0))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyCorpusConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ToyCorpusConfig keys: {sorted(unknown)}")
        return cls(**d)


def class_profile(cfg: ToyCorpusConfig, k: int) -> np.ndarray:
    """Static per-class spectral shape: base energy, tilt, formant-like bump."""
    b = np.arange(MEL_BINS, dtype=np.float64)
    lin = (b - 40.0) / 40.0
    bump = 1.5 * np.exp(-0.5 * ((b - cfg.bump_centers[k]) / 5.0) ** 2)
    return cfg.energies[k] + cfg.tilts[k] * lin + bump


_CONTENT_PATTERNS = None


def content_patterns() -> np.ndarray:
    """Class-independent spectral patterns modulated over time by each utterance."""
    global _CONTENT_PATTERNS
    if _CONTENT_PATTERNS is None:
        b = np.arange(MEL_BINS, dtype=np.float64)
        _CONTENT_PATTERNS = np.stack(
            [np.sin(2 * np.pi * b / 16.0), np.cos(2 * np.pi * b / 23.0)]
        )
    return _CONTENT_PATTERNS


def generate_toy_corpus(cfg: ToyCorpusConfig, out_dir) -> DatasetManifest:
    """Write a deterministic synthetic corpus; classes are linearly separable
    from mean frame features while frame-level content varies independently."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    patterns = content_patterns()
    records = []
    for k in range(cfg.num_classes):
        profile = class_profile(cfg, k)
        for u in range(cfg.utterances_per_class):
            T = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
            # slow AR(1) envelopes for the two content patterns
            env = np.zeros((T, 2))
            state = rng.standard_normal(2) * 0.5
            for t in range(T):
                state = 0.95 * state + 0.25 * rng.standard_normal(2)
                env[t] = state
            x = profile[None, :] + env @ patterns
            x += cfg.content_noise * rng.standard_normal((T, MEL_BINS))
            utt_id = f"c{k:02d}_u{u:03d}"
            rel = f"features/{utt_id}.bin"
            save_matrix(out_dir / rel, x.astype(np.float32))
            records.append(UtteranceRecord(utt_id=utt_id, path=rel, speaker=k, frames=T))
    manifest = DatasetManifest(
        records=records,
        num_classes=cfg.num_classes,
        class_counts=[cfg.utterances_per_class] * cfg.num_classes,
    )
    save_manifest(manifest, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# speaker embeddings


class ToyEmbeddingProvider:
    """Deterministic unit vector per class, seeded; stands in for a pretrained
    extractor at desk scale."""

    def __init__(self, num_classes: int, seed: int = 0):
        self.num_classes = num_classes
        self.seed = seed
        self._cache = {}

    def for_speaker(self, speaker: int) -> np.ndarray:
        if speaker not in self._cache:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_material(self.seed, "emb", speaker))))
            v = rng.standard_normal(EMBEDDING_DIM)
            self._cache[speaker] = (v / np.linalg.norm(v)).astype(np.float32)
        return self._cache[speaker]

    def for_utterance(self, record: UtteranceRecord) -> np.ndarray:
        return self.for_speaker(record.speaker)


class FileEmbeddingProvider:
    """Precomputed embeddings from the dataset directory, per utterance with a
    per-speaker fallback."""

    def __init__(self, root):
        self.root = Path(root) / "embeddings"

    def for_utterance(self, record: UtteranceRecord) -> np.ndarray:
        for name in (f"{record.utt_id}.bin", f"spk_{record.speaker}.bin"):
            path = self.root / name
            if path.exists():
                vec = load_matrix(path).reshape(-1)
                if vec.shape[0] != EMBEDDING_DIM:
                    raise DataError(f"{path}: embedding has {vec.shape[0]} dims")
                if not np.all(np.isfinite(vec)):
                    raise DataError(f"{path}: non-finite embedding")
                return vec
        raise DataError(f"no embedding for utterance {record.utt_id}")


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    features: torch.Tensor  # (B, T, mel_bins)
    mask: torch.Tensor  # (B, T), 1.0 on true frames
    labels: torch.Tensor  # (B,)
    embeddings: torch.Tensor  # (B, 192)
    utt_ids: list


def pad_batch(matrices) -> tuple[torch.Tensor, torch.Tensor]:
    max_t = max(m.shape[0] for m in matrices)
    feats = np.zeros((len(matrices), max_t, matrices[0].shape[1]), dtype=np.float32)
    mask = np.zeros((len(matrices), max_t), dtype=np.float32)
    for i, m in enumerate(matrices):
        feats[i, : m.shape[0]] = m
        mask[i, : m.shape[0]] = 1.0
    return torch.from_numpy(feats), torch.from_numpy(mask)


def make_batches(
    manifest: DatasetManifest,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    features: dict | None = None,
    root=None,
    provider=None,
):
    """Yield every utterance exactly once, shuffled deterministically per
    (seed, epoch), padded with masks."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if features is None:
        if root is None:
            raise ValueError("need either preloaded features or a dataset root")
        features = load_features(manifest, root)
    if provider is None:
        provider = ToyEmbeddingProvider(manifest.num_classes, seed=seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_material(seed, "perm", epoch))))
    order = rng.permutation(len(manifest.records))
    for start in range(0, len(order), batch_size):
        chunk = [manifest.records[i] for i in order[start : start + batch_size]]
        feats, mask = pad_batch([features[r.utt_id] for r in chunk])
        labels = torch.tensor([r.speaker for r in chunk], dtype=torch.long)
        embs = torch.from_numpy(np.stack([provider.for_utterance(r) for r in chunk]))
        yield Batch(feats, mask, labels, embs, [r.utt_id for r in chunk])
