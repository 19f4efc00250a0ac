"""Inference pipeline: hider then combiner with a policy-chosen target
speaker embedding. The finder plays no part here; corpus anonymisation loads
only the hider and combiner parameter containers.

Target selection never looks at audio content. Deliberately absent is any
"most distant target" policy: picking the target as a function of the source
voice would itself reveal source characteristics.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import (
    EMBEDDING_DIM,
    MelSpectrogram,
    SpeakerEmbedding,
    load_matrix,
    save_matrix,
    seed_material,
)
from .data import DatasetManifest, load_features
from .networks import load_checkpoint

MODES = ("utterance-random", "fixed-target", "speaker-consistent-random")


@dataclass
class TargetPolicy:
    pool: list  # (target_id, 192-d vector) pairs
    mode: str = "utterance-random"
    seed: int = 0
    fixed_target_id: str | None = None

    def __post_init__(self):
        if not self.pool:
            raise ValueError("target pool must not be empty")
        if self.mode not in MODES:
            raise ValueError(f"unknown policy mode {self.mode!r} (choose from {MODES})")
        if self.fixed_target_id is not None and not any(
            p[0] == self.fixed_target_id for p in self.pool
        ):
            raise ValueError(f"fixed target {self.fixed_target_id!r} not in pool")
        for tid, vec in self.pool:
            v = np.asarray(vec)
            if v.shape != (EMBEDDING_DIM,):
                raise ValueError(f"pool entry {tid!r} has shape {v.shape}")


@dataclass
class TargetChoice:
    target_id: str
    embedding: np.ndarray


def _index_for(seed: int, key: str, n: int) -> int:
    digest = hashlib.sha256(f"{seed}|{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % n


def select_target(policy: TargetPolicy, utterance_id: str, source_speaker_id=None) -> TargetChoice:
    """Pick the target embedding for one utterance.

    utterance-random keys the draw on (seed, utterance_id); the
    speaker-consistent mode keys it on (seed, source_speaker_id) so all
    utterances of one source share a target. Selection is a pure function of
    those keys, independent of the audio itself.
    """
    if policy.mode == "fixed-target":
        if policy.fixed_target_id is None:
            tid, vec = policy.pool[0]
        else:
            matches = [p for p in policy.pool if p[0] == policy.fixed_target_id]
            if not matches:
                raise ValueError(f"fixed target {policy.fixed_target_id!r} not in pool")
            tid, vec = matches[0]
    elif policy.mode == "speaker-consistent-random":
        if source_speaker_id is None:
            raise ValueError("speaker-consistent mode needs the source speaker id")
        tid, vec = policy.pool[_index_for(policy.seed, f"spk:{source_speaker_id}", len(policy.pool))]
    else:  # utterance-random
        tid, vec = policy.pool[_index_for(policy.seed, f"utt:{utterance_id}", len(policy.pool))]
    return TargetChoice(tid, np.asarray(vec, dtype=np.float32))


def toy_pool(size: int, seed: int = 0) -> list:
    """Seeded pool of external-speaker stand-ins (unit vectors)."""
    pool = []
    for i in range(size):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_material(seed, "pool", i))))
        v = rng.standard_normal(EMBEDDING_DIM)
        pool.append((f"ext_{i:03d}", (v / np.linalg.norm(v)).astype(np.float32)))
    return pool


def load_pool(path) -> list:
    """Pool from a directory of <target_id>.bin embedding files."""
    path = Path(path)
    files = sorted(path.glob("*.bin"))
    if not files:
        raise ValueError(f"no .bin embeddings in {path}")
    pool = []
    for f in files:
        vec = load_matrix(f).reshape(-1)
        if vec.shape[0] != EMBEDDING_DIM:
            raise ValueError(f"{f}: embedding has {vec.shape[0]} dims, expected {EMBEDDING_DIM}")
        pool.append((f.stem, vec))
    return pool


def _as_vector(target) -> np.ndarray:
    if isinstance(target, SpeakerEmbedding):
        return np.asarray(target.vector, dtype=np.float32)
    if isinstance(target, TargetChoice):
        return target.embedding
    return np.asarray(target, dtype=np.float32)


def anonymise_features(frames: np.ndarray, target, hider, combiner):
    """Run one T x 80 matrix through hider and combiner (postnet output).

    Returns (anonymised frames, hidden frames)."""
    hider.eval()
    combiner.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.array(frames, dtype=np.float32)).unsqueeze(0)
        h = hider(x)
        emb = torch.from_numpy(np.array(_as_vector(target))).unsqueeze(0)
        _, post = combiner(h, emb)
    return post.squeeze(0).numpy(), h.squeeze(0).numpy()


def anonymise_utterance(x: MelSpectrogram, target, hider, combiner) -> MelSpectrogram:
    """Anonymise one utterance; frame count is preserved."""
    out, _ = anonymise_features(x.frames, target, hider, combiner)
    return MelSpectrogram(frames=out, sample_rate_hz=x.sample_rate_hz)


@dataclass
class AnonymisationReport:
    rows: list = field(default_factory=list)  # (utt_id, target_id, status, error)

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.rows if r[2] != "ok")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("utterance_id", "target_id", "status", "error"))
            w.writerows(self.rows)


def anonymise_corpus(
    manifest: DatasetManifest,
    policy: TargetPolicy,
    checkpoint,
    out_dir,
    *,
    root=None,
    features: dict | None = None,
    export_hidden: bool = False,
) -> AnonymisationReport:
    """Anonymise every utterance in the manifest, writing one output file per
    input plus a mapping report for audit. Failures are per-utterance rows,
    never silent passthroughs of source features."""
    nets, _, _ = load_checkpoint(checkpoint, parts=("hider", "combiner"))
    hider, combiner = nets["hider"], nets["combiner"]
    if features is None:
        features = load_features(manifest, root)
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    if export_hidden:
        (out_dir / "hidden").mkdir(parents=True, exist_ok=True)
    report = AnonymisationReport()
    for record in manifest.records:
        choice = select_target(policy, record.utt_id, record.speaker)
        try:
            anon, hidden = anonymise_features(
                features[record.utt_id], choice, hider, combiner
            )
            save_matrix(out_dir / "features" / f"{record.utt_id}.bin", anon)
            if export_hidden:
                save_matrix(out_dir / "hidden" / f"{record.utt_id}.bin", hidden)
            report.rows.append((record.utt_id, choice.target_id, "ok", ""))
        except Exception as err:  # keep going; the report carries the failure
            report.rows.append((record.utt_id, choice.target_id, "error", str(err)))
    report.write_csv(out_dir / "mapping.csv")
    return report
