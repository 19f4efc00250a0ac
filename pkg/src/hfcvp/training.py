"""Alternating adversarial training: finder steps minimize the finder loss on
a detached hidden representation; generator steps minimize reconstruction plus
beta times leakage through a parameter-frozen finder.

Gradient isolation is structural: the finder step never builds a graph into
the hider, and the generator step flips requires_grad off on finder
parameters for its forward, so each optimizer can only move its own side.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses
from .core import ClassPrior, TrainConfig, validate
from .data import DatasetManifest, ToyEmbeddingProvider, load_features, make_batches
from .networks import (
    NetworkConfig,
    build_networks,
    load_checkpoint,
    restore_rng,
    save_checkpoint,
)


class DivergenceError(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class EpochMetrics:
    epoch: int
    lr_g: float
    lr_f: float
    loss_combiner: float
    loss_leakage: float
    loss_finder: float
    probe_acc: float | None = None


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "lr_g", "lr_f", "loss_combiner", "loss_leakage", "loss_finder", "probe_acc")

    def append(self, row: EpochMetrics) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.rows.append(row)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow(
                    [
                        r.epoch,
                        f"{r.lr_g:.10g}",
                        f"{r.lr_f:.10g}",
                        f"{r.loss_combiner:.10g}",
                        f"{r.loss_leakage:.10g}",
                        f"{r.loss_finder:.10g}",
                        "" if r.probe_acc is None else f"{r.probe_acc:.10g}",
                    ]
                )

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for r in self.rows:
                f.write(json.dumps(r.__dict__) + "\n")

    @classmethod
    def read_csv(cls, path) -> "MetricsLog":
        log = cls()
        with open(path, newline="") as f:
            for rec in csv.DictReader(f):
                log.append(
                    EpochMetrics(
                        epoch=int(rec["epoch"]),
                        lr_g=float(rec["lr_g"]),
                        lr_f=float(rec["lr_f"]),
                        loss_combiner=float(rec["loss_combiner"]),
                        loss_leakage=float(rec["loss_leakage"]),
                        loss_finder=float(rec["loss_finder"]),
                        probe_acc=float(rec["probe_acc"]) if rec["probe_acc"] else None,
                    )
                )
        return log


@dataclass
class TrainState:
    config: TrainConfig
    net_config: NetworkConfig
    nets: dict
    optimizers: dict
    prior: torch.Tensor
    epoch: int = 0
    global_step: int = 0
    running: dict = field(default_factory=dict)


def parameter_fingerprint(module) -> str:
    """Digest over all parameters and buffers; equal iff bit-identical."""
    h = hashlib.sha256()
    for key, t in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def lr_at(epoch: int, config: TrainConfig) -> tuple[float, float]:
    """Constant until decay_start_epoch, exponential decay afterwards."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    exponent = max(0, epoch - config.decay_start_epoch)
    factor = config.decay_gamma**exponent
    return config.lr_generator * factor, config.lr_finder * factor


def _snapshot(state: TrainState, extra: dict) -> dict:
    snap = {"epoch": state.epoch, "global_step": state.global_step}
    snap.update(extra)
    return snap


def make_state(
    config: TrainConfig,
    net_config: NetworkConfig,
    prior: ClassPrior,
) -> TrainState:
    report = validate(config)
    if not report.ok:
        raise ValueError("invalid TrainConfig: " + "; ".join(report.violations))
    nets = build_networks(net_config)
    gen_params = list(nets["hider"].parameters()) + list(nets["combiner"].parameters())
    optimizers = {
        "generator": torch.optim.Adam(gen_params, lr=config.lr_generator),
        "finder": torch.optim.Adam(nets["finder"].parameters(), lr=config.lr_finder),
    }
    prior_t = torch.tensor(np.array(prior.probs), dtype=torch.float32)
    return TrainState(config, net_config, nets, optimizers, prior_t)


def train_step_finder(state: TrainState, batch) -> float:
    """One adversary update; hider and combiner are untouched by construction."""
    cfg = state.config
    with torch.no_grad():
        h = state.nets["hider"](batch.features, batch.mask)
    if not torch.isfinite(h).all():
        raise DivergenceError(
            "non-finite hidden representation", _snapshot(state, {"loss_finder": math.nan})
        )
    f = state.nets["finder"](h, batch.mask)
    if cfg.loss_regime == "kl":
        loss = losses.finder_kl(f, batch.labels)
    else:
        truth = F.one_hot(batch.labels, state.net_config.num_classes).float()
        loss = losses.finder_mse(f, truth)
    if not torch.isfinite(loss):
        raise DivergenceError(
            "non-finite finder loss", _snapshot(state, {"loss_finder": float(loss.detach())})
        )
    opt = state.optimizers["finder"]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(state.nets["finder"].parameters(), cfg.grad_clip)
    opt.step()
    state.global_step += 1
    return float(loss.detach())


def train_step_generator(state: TrainState, batch) -> tuple[float, float, float]:
    """One hider+combiner update; finder parameters stay bit-identical.

    Returns (reconstruction, leakage, total) where total is exactly
    reconstruction + beta * leakage.
    """
    cfg = state.config
    finder = state.nets["finder"]
    h = state.nets["hider"](batch.features, batch.mask)
    if not torch.isfinite(h).all():
        raise DivergenceError(
            "non-finite hidden representation",
            _snapshot(state, {"loss_combiner": math.nan, "loss_leakage": math.nan}),
        )
    for p in finder.parameters():
        p.requires_grad_(False)
    try:
        f = finder(h, batch.mask)
    finally:
        for p in finder.parameters():
            p.requires_grad_(True)
    pre, post = state.nets["combiner"](h, batch.embeddings, batch.mask)
    recon = losses.reconstruction_mse(pre, batch.features, batch.mask) + losses.reconstruction_mse(
        post, batch.features, batch.mask
    )
    if cfg.loss_regime == "kl":
        leak = losses.leakage_kl(f, state.prior)
    else:
        leak = losses.leakage_mse(f, state.prior)
    total = losses.generator_total(recon, leak, cfg.beta)
    if not torch.isfinite(total):
        raise DivergenceError(
            "non-finite generator loss",
            _snapshot(state, {"loss_combiner": float(recon.detach()), "loss_leakage": float(leak.detach())}),
        )
    opt = state.optimizers["generator"]
    opt.zero_grad(set_to_none=True)
    total.backward()
    torch.nn.utils.clip_grad_norm_(
        [p for g in opt.param_groups for p in g["params"]], cfg.grad_clip
    )
    opt.step()
    state.global_step += 1
    # reported total is recomposed from the reported components so the
    # decomposition holds exactly; the float32 graph value drove backward
    recon_v, leak_v = float(recon.detach()), float(leak.detach())
    return recon_v, leak_v, recon_v + cfg.beta * leak_v


def lr_range_test(
    config: TrainConfig,
    manifest: DatasetManifest,
    prior: ClassPrior,
    *,
    net_config: NetworkConfig | None = None,
    root=None,
    features: dict | None = None,
    provider=None,
    side: str = "generator",
    lr_min: float = 1e-6,
    lr_max: float = 1e-1,
    steps: int = 60,
    smoothing: float = 0.7,
) -> tuple[list, float]:
    """Ramp the learning rate exponentially over fresh-model steps and record
    the smoothed loss, the usual procedure for picking an initial rate.

    Returns (curve, suggestion) where curve is a list of (lr, smoothed loss)
    and suggestion is the rate one decade below the smoothed minimum. Stops
    early once the loss explodes past 4x its best."""
    if side not in ("generator", "finder"):
        raise ValueError("side must be 'generator' or 'finder'")
    net_config = net_config or NetworkConfig.toy(manifest.num_classes)
    torch.manual_seed(config.seed)
    state = make_state(config, net_config, prior)
    if features is None:
        features = load_features(manifest, root)
    if provider is None:
        provider = ToyEmbeddingProvider(manifest.num_classes, seed=config.seed)
    batches = []
    while len(batches) < steps:
        for b in make_batches(manifest, config.batch_size, config.seed, len(batches),
                              features=features, provider=provider):
            batches.append(b)
            if len(batches) >= steps:
                break
    ratio = (lr_max / lr_min) ** (1.0 / max(1, steps - 1))
    curve = []
    smoothed = None
    best = math.inf
    for i, batch in enumerate(batches):
        lr = lr_min * ratio**i
        for group in state.optimizers[side].param_groups:
            group["lr"] = lr
        try:
            if side == "finder":
                loss = train_step_finder(state, batch)
            else:
                _, _, loss = train_step_generator(state, batch)
        except DivergenceError:
            break
        smoothed = loss if smoothed is None else smoothing * smoothed + (1 - smoothing) * loss
        curve.append((lr, smoothed))
        best = min(best, smoothed)
        if smoothed > 4.0 * best and i > steps // 4:
            break
    if not curve:
        raise RuntimeError("no usable steps in range test")
    best_lr = min(curve, key=lambda p: p[1])[0]
    return curve, best_lr / 10.0


def run_training(
    config: TrainConfig,
    manifest: DatasetManifest,
    prior: ClassPrior,
    *,
    net_config: NetworkConfig | None = None,
    root=None,
    features: dict | None = None,
    provider=None,
    out_dir=None,
    resume_from=None,
    probe_hook=None,
    probe_every: int = 0,
    log=None,
    return_state: bool = False,
):
    """Full alternating loop with per-epoch learning-rate decay, periodic and
    best checkpoints, divergence abort after 3 consecutive non-finite steps,
    and bit-exact resume from a periodic checkpoint under the same seed."""
    net_config = net_config or NetworkConfig(num_classes=manifest.num_classes)
    torch.manual_seed(config.seed)
    state = make_state(config, net_config, prior)
    start_epoch = 1
    if resume_from is not None:
        nets, _, ck_manifest = load_checkpoint(resume_from)
        state.nets = nets
        gen_params = list(nets["hider"].parameters()) + list(nets["combiner"].parameters())
        state.optimizers = {
            "generator": torch.optim.Adam(gen_params, lr=config.lr_generator),
            "finder": torch.optim.Adam(nets["finder"].parameters(), lr=config.lr_finder),
        }
        from .core import load_matrix
        from .networks import _restore_optimizer  # local: checkpoint internals

        ck = Path(resume_from)
        for name in ("generator", "finder"):
            opt_file = ck / f"opt_{name}.bin"
            if opt_file.exists():
                _restore_optimizer(
                    state.optimizers[name],
                    load_matrix(opt_file),
                    ck_manifest["optimizers"][name]["steps"],
                )
        restore_rng(ck_manifest)
        start_epoch = ck_manifest["epoch"] + 1

    if features is None:
        features = load_features(manifest, root)
    if provider is None:
        provider = ToyEmbeddingProvider(manifest.num_classes, seed=config.seed)

    metrics = MetricsLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    consecutive_bad = 0
    best_total = math.inf

    def checkpoint(tag, with_opt=True):
        if out_dir is None:
            return
        save_checkpoint(
            out_dir / tag,
            state.nets,
            net_config,
            train_config=config,
            epoch=state.epoch,
            optimizers=state.optimizers if with_opt else None,
            rng_state=with_opt,
        )

    def flush_metrics():
        if out_dir is not None:
            metrics.write_csv(out_dir / "metrics.csv")
            metrics.write_jsonl(out_dir / "metrics.jsonl")

    for epoch in range(start_epoch, config.epochs + 1):
        state.epoch = epoch
        lr_g, lr_f = lr_at(epoch, config)
        for group in state.optimizers["generator"].param_groups:
            group["lr"] = lr_g
        for group in state.optimizers["finder"].param_groups:
            group["lr"] = lr_f

        sums = {"combiner": 0.0, "leakage": 0.0, "finder": 0.0, "total": 0.0}
        n_gen = 0
        n_fin = 0
        for batch in make_batches(
            manifest, config.batch_size, config.seed, epoch, features=features, provider=provider
        ):
            for _ in range(config.finder_steps_per_generator_step):
                try:
                    lf = train_step_finder(state, batch)
                    consecutive_bad = 0
                    sums["finder"] += lf
                    n_fin += 1
                except DivergenceError as err:
                    consecutive_bad += 1
                    if consecutive_bad >= 3:
                        checkpoint("ckpt_diverged")
                        flush_metrics()
                        raise DivergenceError(
                            f"aborting: 3 consecutive non-finite losses (epoch {epoch})",
                            err.snapshot,
                        ) from err
            try:
                lc, ll, lt = train_step_generator(state, batch)
                consecutive_bad = 0
                sums["combiner"] += lc
                sums["leakage"] += ll
                sums["total"] += lt
                n_gen += 1
            except DivergenceError as err:
                consecutive_bad += 1
                if consecutive_bad >= 3:
                    checkpoint("ckpt_diverged")
                    flush_metrics()
                    raise DivergenceError(
                        f"aborting: 3 consecutive non-finite losses (epoch {epoch})",
                        err.snapshot,
                    ) from err

        state.running = {k: (sums[k] / max(1, n_gen if k != "finder" else n_fin)) for k in sums}
        probe_acc = None
        if probe_hook is not None and probe_every and (
            epoch % probe_every == 0 or epoch == config.epochs
        ):
            probe_acc = probe_hook(state.nets, epoch)
        row = EpochMetrics(
            epoch=epoch,
            lr_g=lr_g,
            lr_f=lr_f,
            loss_combiner=state.running["combiner"],
            loss_leakage=state.running["leakage"],
            loss_finder=state.running["finder"],
            probe_acc=probe_acc,
        )
        metrics.append(row)
        if log is not None:
            log(
                f"epoch {epoch:4d}  lr_g {lr_g:.3e}  combiner {row.loss_combiner:.5f}  "
                f"leakage {row.loss_leakage:.6f}  finder {row.loss_finder:.6f}"
            )

        if state.running["total"] < best_total:
            best_total = state.running["total"]
            checkpoint("ckpt_best", with_opt=False)
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            checkpoint(f"ckpt_epoch_{epoch:04d}")
        flush_metrics()

    state.epoch = config.epochs
    checkpoint("ckpt_final")
    flush_metrics()
    if return_state:
        return metrics, state
    return metrics
