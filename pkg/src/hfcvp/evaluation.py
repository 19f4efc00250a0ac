"""Evaluation: equal error rate over verification scores, a held-out speaker
probe measuring identity leakage from representations, and the beta sweep
tying both to training runs.

The probe is the anonymisation analogue of an attacker who trains a fresh
classifier on whatever representation they can intercept: accuracy near
chance means the representation carries little usable identity.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .core import ClassPrior, DimensionError, TrainConfig, seed_material
from .data import Batch, DatasetManifest, load_features, pad_batch
from .losses import finder_kl
from .networks import Finder, NetworkConfig
from . import anonymise as anon_mod


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).reshape(-1)
        self.impostor = np.asarray(self.impostor, dtype=np.float64).reshape(-1)
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise ValueError("need at least one genuine and one impostor score")
        if not (np.isfinite(self.genuine).all() and np.isfinite(self.impostor).all()):
            raise ValueError("scores must be finite")


def compute_eer(scores: ScoreSet) -> float:
    """Equal error rate of a verification score set.

    Sweeps thresholds over the pooled scores with the convention
    FAR(t) = #{impostor >= t} / N_imp and FRR(t) = #{genuine < t} / N_gen,
    then interpolates linearly between the two adjacent operating points
    where FAR - FRR changes sign. Interpolating between operating points
    (not between raw thresholds) makes the value invariant to monotonic
    rescaling of the scores.
    """
    g = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    thresholds = np.unique(np.concatenate([g, imp]))
    # sentinel above every score so FAR=0 / FRR=1 is always reachable
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    far = 1.0 - np.searchsorted(imp, thresholds, side="left") / imp.size
    frr = np.searchsorted(g, thresholds, side="left") / g.size
    diff = far - frr  # starts at +1, ends <= 0
    k = int(np.argmax(diff <= 0.0))
    if k == 0:
        return float(far[0])
    a, b = diff[k - 1], diff[k]
    alpha = a / (a - b)
    return float(far[k - 1] + alpha * (far[k] - far[k - 1]))


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"cosine between {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine score undefined for zero vector")
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# speaker probe


@dataclass
class ProbeConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    holdout: float = 0.2
    net_config: NetworkConfig | None = None
    num_classes: int | None = None


def _stratified_split(labels, holdout, seed):
    by_class = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(int(lab), []).append(i)
    for lab, idx in by_class.items():
        if len(idx) < 2:
            raise ValueError(f"class {lab} has {len(idx)} example(s), need at least 2")
    train_idx, held_idx = [], []
    for lab in sorted(by_class):
        idx = np.array(by_class[lab])
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_material(seed, "split", lab))))
        rng.shuffle(idx)
        n_held = max(1, math.ceil(holdout * len(idx)))
        held_idx.extend(idx[:n_held].tolist())
        train_idx.extend(idx[n_held:].tolist())
    return sorted(train_idx), sorted(held_idx)


def _probe_batches(mats, labels, order, batch_size):
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        feats, mask = pad_batch([mats[i] for i in chunk])
        labs = torch.tensor([labels[i] for i in chunk], dtype=torch.long)
        yield feats, mask, labs


def train_probe(representations, config: ProbeConfig | None = None) -> float:
    """Train a fresh classifier on (T x D matrix, label) pairs and return
    held-out accuracy. The classifier reuses the finder architecture but its
    weights start from scratch; nothing leaks in from any training run.

    Split is stratified 80/20, deterministic per seed."""
    config = config or ProbeConfig()
    mats = [np.asarray(m, dtype=np.float32) for m, _ in representations]
    labels = [int(lab) for _, lab in representations]
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("probe needs at least 2 classes")
    num_classes = config.num_classes or (max(classes) + 1)
    train_idx, held_idx = _stratified_split(labels, config.holdout, config.seed)

    torch.manual_seed(config.seed)
    net_cfg = config.net_config or NetworkConfig.toy(num_classes)
    if net_cfg.num_classes != num_classes:
        net_cfg = replace(net_cfg, num_classes=num_classes)
    if mats[0].shape[1] != net_cfg.mel_bins:
        net_cfg = replace(net_cfg, mel_bins=mats[0].shape[1])
    probe = Finder(net_cfg)
    opt = torch.optim.Adam(probe.parameters(), lr=config.lr)
    perm_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_material(config.seed, "order"))))

    for _ in range(config.epochs):
        probe.train()
        order = np.array(train_idx)
        perm_rng.shuffle(order)
        for feats, mask, labs in _probe_batches(mats, labels, order.tolist(), config.batch_size):
            opt.zero_grad()
            probs = probe(feats, mask)
            loss = finder_kl(probs, labs)
            loss.backward()
            opt.step()

    probe.eval()
    hits = 0
    with torch.no_grad():
        for feats, mask, labs in _probe_batches(mats, labels, held_idx, config.batch_size):
            pred = probe(feats, mask).argmax(dim=1)
            hits += int((pred == labs).sum())
    return hits / len(held_idx)


def hidden_representations(manifest: DatasetManifest, features: dict, hider) -> list:
    """(hidden matrix, label) pairs for every utterance, for probing."""
    hider.eval()
    pairs = []
    with torch.no_grad():
        for record in manifest.records:
            x = torch.from_numpy(np.asarray(features[record.utt_id], dtype=np.float32))
            h = hider(x.unsqueeze(0)).squeeze(0).numpy()
            pairs.append((h, record.speaker))
    return pairs


def feature_pairs(manifest: DatasetManifest, features: dict) -> list:
    return [(features[r.utt_id], r.speaker) for r in manifest.records]


# ---------------------------------------------------------------------------
# verification EER on anonymised output

def _mean_frame(mat) -> np.ndarray:
    return np.asarray(mat, dtype=np.float64).mean(axis=0)


def anonymisation_eer(manifest: DatasetManifest, original: dict, anonymised: dict) -> float:
    """EER of a cosine verifier enrolled on original features and tested on
    anonymised ones. Enrollment per speaker is the centroid of mean-frame
    vectors; each anonymised utterance scores against every enrolled speaker,
    genuine when the source speaker matches. Higher EER = stronger privacy."""
    centroids = {}
    for record in manifest.records:
        centroids.setdefault(record.speaker, []).append(_mean_frame(original[record.utt_id]))
    centroids = {s: np.mean(v, axis=0) for s, v in centroids.items()}
    genuine, impostor = [], []
    for record in manifest.records:
        test = _mean_frame(anonymised[record.utt_id])
        for spk, cent in centroids.items():
            score = cosine_score(cent, test)
            (genuine if spk == record.speaker else impostor).append(score)
    return compute_eer(ScoreSet(np.array(genuine), np.array(impostor)))


# ---------------------------------------------------------------------------
# beta sweep

SWEEP_COLUMNS = ("beta", "loss_combiner", "loss_leakage", "probe_acc", "eer", "diverged")


@dataclass
class SweepRow:
    beta: float
    loss_combiner: float
    loss_leakage: float
    probe_acc: float
    eer: float
    diverged: bool = False


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)

    def __post_init__(self):
        betas = [r.beta for r in self.rows]
        if len(set(betas)) != len(betas):
            raise ValueError("duplicate beta in sweep report")
        self.rows = sorted(self.rows, key=lambda r: r.beta)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(SWEEP_COLUMNS)
            for r in self.rows:
                w.writerow((f"{r.beta:.6g}", f"{r.loss_combiner:.8g}", f"{r.loss_leakage:.8g}",
                            f"{r.probe_acc:.8g}", f"{r.eer:.8g}", int(r.diverged)))

    @classmethod
    def read_csv(cls, path) -> "SweepReport":
        rows = []
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames) != SWEEP_COLUMNS:
                raise ValueError(f"bad sweep header: {reader.fieldnames}")
            for rec in reader:
                rows.append(SweepRow(
                    beta=float(rec["beta"]),
                    loss_combiner=float(rec["loss_combiner"]),
                    loss_leakage=float(rec["loss_leakage"]),
                    probe_acc=float(rec["probe_acc"]),
                    eer=float(rec["eer"]),
                    diverged=bool(int(rec["diverged"])),
                ))
        return cls(rows)


def run_sweep(
    betas,
    base_config: TrainConfig,
    manifest: DatasetManifest,
    prior: ClassPrior,
    *,
    net_config: NetworkConfig | None = None,
    root=None,
    features: dict | None = None,
    provider=None,
    out_dir=None,
    probe_config: ProbeConfig | None = None,
    pool_size: int = 16,
) -> SweepReport:
    """Train once per beta (same seed and data throughout, beta the only
    change), then measure end-of-run losses, a fresh probe on the hidden
    representation, and the verification EER on anonymised output.

    A diverged run contributes a flagged row; the sweep carries on."""
    from .training import DivergenceError, run_training, make_state  # local: avoid cycle

    betas = sorted(float(b) for b in betas)
    if len(set(betas)) != len(betas):
        raise ValueError("duplicate beta values")
    if features is None:
        features = load_features(manifest, root)
    pool = anon_mod.toy_pool(pool_size, seed=base_config.seed)
    rows = []
    for beta in betas:
        config = replace(base_config, beta=beta)
        run_out = None if out_dir is None else f"{out_dir}/beta_{beta:.6g}"
        try:
            log, state = run_training(
                config, manifest, prior,
                net_config=net_config, features=features, provider=provider,
                out_dir=run_out, return_state=True,
            )
        except DivergenceError:
            rows.append(SweepRow(beta, math.nan, math.nan, math.nan, math.nan, diverged=True))
            continue
        last = log.rows[-1]
        hidden = hidden_representations(manifest, features, state.nets["hider"])
        probe_acc = train_probe(hidden, probe_config)
        policy = anon_mod.TargetPolicy(pool=pool, seed=base_config.seed)
        anonymised = {}
        hider, combiner = state.nets["hider"], state.nets["combiner"]
        for record in manifest.records:
            choice = anon_mod.select_target(policy, record.utt_id, record.speaker)
            out, _ = anon_mod.anonymise_features(features[record.utt_id], choice, hider, combiner)
            anonymised[record.utt_id] = out
        eer = anonymisation_eer(manifest, features, anonymised)
        rows.append(SweepRow(beta, last.loss_combiner, last.loss_leakage, probe_acc, eer))
    report = SweepReport(rows)
    if out_dir is not None:
        report.write_csv(f"{out_dir}/sweep.csv")
    return report
