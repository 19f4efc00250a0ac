"""Command-line surface: gen-toy, prior, train, anonymise, eval (eer, probe),
sweep. Exit codes are scriptable: 0 success, 1 usage or config error,
2 runtime error (including divergence aborts), 3 data error.

Config precedence for train/sweep: built-in defaults, then a JSON config
file, then explicit command-line flags. Unknown config keys are rejected.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from .core import DimensionError, RangeError, TrainConfig, load_json, load_matrix
from .data import (
    DataError,
    DatasetManifest,
    ToyCorpusConfig,
    estimate_prior,
    generate_toy_corpus,
    load_manifest,
)
from .networks import CheckpointError, NetworkConfig
from .training import DivergenceError

BETA_STABLE_MAX = 0.07  # warn above this; runs are known to go unstable


class ExitCode:
    OK = 0
    USAGE = 1
    RUNTIME = 2
    DATA = 3


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, indent=2, sort_keys=True))


def _require_empty(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise click.UsageError(
                f"{path} exists and is not empty; pass --force to overwrite"
            )


def _seed_default() -> int:
    raw = os.environ.get("HFCVP_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise click.UsageError(f"HFCVP_SEED must be an integer, got {raw!r}")


def _load_dataset(data_dir) -> DatasetManifest:
    root = Path(data_dir)
    if not (root / "manifest.json").exists():
        raise DataError(f"no manifest.json under {root}")
    return load_manifest(root)


def _merge_train_config(config_file, flag_values: dict) -> TrainConfig:
    merged = dataclasses.asdict(TrainConfig())
    if config_file is not None:
        file_cfg = load_json(config_file)
        known = set(merged)
        unknown = set(file_cfg) - known
        if unknown:
            raise click.UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key, value in flag_values.items():
        if value is not None:
            merged[key] = value
    return TrainConfig.from_dict(merged)


def _net_config(preset: str, net_config_file, num_classes: int) -> NetworkConfig:
    if net_config_file is not None:
        d = load_json(net_config_file)
        d.setdefault("num_classes", num_classes)
        return NetworkConfig.from_dict(d)
    if preset == "toy":
        return NetworkConfig.toy(num_classes)
    return NetworkConfig(num_classes=num_classes)


@click.group()
def cli():
    """Voice privacy: hide speaker identity, recombine with any voice."""


# ---------------------------------------------------------------------------


@cli.command("gen-toy")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--classes", default=8, show_default=True, type=int)
@click.option("--per-class", default=100, show_default=True, type=int)
@click.option("--min-frames", default=40, show_default=True, type=int)
@click.option("--max-frames", default=120, show_default=True, type=int)
@click.option("--content-noise", default=0.1, show_default=True, type=float)
@click.option("--seed", default=None, type=int, help="defaults to HFCVP_SEED or 0")
@click.option("--force", is_flag=True)
@click.option("--json", "as_json", is_flag=True)
def cmd_gen_toy(out, classes, per_class, min_frames, max_frames, content_noise, seed, force, as_json):
    """Generate the synthetic multi-speaker corpus."""
    seed = _seed_default() if seed is None else seed
    _require_empty(out, force)
    try:
        cfg = ToyCorpusConfig(
            num_classes=classes,
            utterances_per_class=per_class,
            min_frames=min_frames,
            max_frames=max_frames,
            content_noise=content_noise,
            seed=seed,
        )
    except ValueError as err:
        raise click.UsageError(str(err))
    manifest = generate_toy_corpus(cfg, out)
    summary = {
        "out": str(out),
        "utterances": len(manifest.records),
        "classes": manifest.num_classes,
        "seed": seed,
    }
    if as_json:
        _echo_json(summary)
    else:
        click.echo(
            f"wrote {summary['utterances']} utterances over "
            f"{summary['classes']} classes to {out}"
        )


@cli.command("prior")
@click.option("--data", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--mode", default="normalize", show_default=True,
              type=click.Choice(["normalize", "softmax"]))
@click.option("--json", "as_json", is_flag=True)
def cmd_prior(data, mode, as_json):
    """Empirical class prior of a dataset."""
    manifest = _load_dataset(data)
    prior = estimate_prior(manifest.labels(), manifest.num_classes, mode=mode)
    if as_json:
        _echo_json({"probs": [float(p) for p in prior.probs],
                    "counts": [int(c) for c in prior.counts], "mode": mode})
    else:
        click.echo(" ".join(f"{p:.6f}" for p in prior.probs))


# ---------------------------------------------------------------------------


@cli.command("train")
@click.option("--data", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--config", "config_file", default=None, type=click.Path(exists=True))
@click.option("--net-config", "net_config_file", default=None, type=click.Path(exists=True))
@click.option("--preset", default="full", show_default=True, type=click.Choice(["full", "toy"]))
@click.option("--beta", default=None, type=float)
@click.option("--epochs", default=None, type=int)
@click.option("--batch-size", default=None, type=int)
@click.option("--lr-generator", default=None, type=float)
@click.option("--lr-finder", default=None, type=float)
@click.option("--decay-gamma", default=None, type=float)
@click.option("--decay-start-epoch", default=None, type=int)
@click.option("--loss-regime", default=None, type=click.Choice(["mse", "kl"]))
@click.option("--finder-steps", "finder_steps_per_generator_step", default=None, type=int)
@click.option("--checkpoint-every", default=None, type=int)
@click.option("--seed", default=None, type=int, help="defaults to HFCVP_SEED or 0")
@click.option("--prior-mode", default="normalize", show_default=True,
              type=click.Choice(["normalize", "softmax"]))
@click.option("--resume", "resume_from", default=None, type=click.Path(exists=True))
@click.option("--force", is_flag=True)
@click.option("--quiet", is_flag=True)
def cmd_train(data, out, config_file, net_config_file, preset, prior_mode,
              resume_from, force, quiet, seed, **flags):
    """Adversarial training run; writes checkpoints and metrics logs."""
    flags["seed"] = _seed_default() if seed is None else seed
    config = _merge_train_config(config_file, flags)
    if config.beta > BETA_STABLE_MAX:
        click.echo(
            f"warning: beta={config.beta} is above the stable range "
            f"(0.05, {BETA_STABLE_MAX}]; training may not converge", err=True
        )
    if resume_from is None:
        _require_empty(out, force)
    manifest = _load_dataset(data)
    prior = estimate_prior(manifest.labels(), manifest.num_classes, mode=prior_mode)
    net_cfg = _net_config(preset, net_config_file, manifest.num_classes)

    from .training import run_training

    run_training(
        config, manifest, prior,
        net_config=net_cfg, root=data, out_dir=out,
        resume_from=resume_from,
        log=None if quiet else lambda s: click.echo(s),
    )
    if not quiet:
        click.echo(f"done: metrics and checkpoints under {out}")


# ---------------------------------------------------------------------------


@cli.command("anonymise")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--in", "data", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--policy", default="utterance-random", show_default=True,
              type=click.Choice(["utterance-random", "fixed-target", "speaker-consistent-random"]))
@click.option("--pool", "pool_dir", default=None, type=click.Path(exists=True),
              help="directory of <target_id>.bin embeddings; default: seeded toy pool")
@click.option("--pool-size", default=16, show_default=True, type=int)
@click.option("--target", "fixed_target_id", default=None, help="target id for fixed-target mode")
@click.option("--seed", default=None, type=int, help="defaults to HFCVP_SEED or 0")
@click.option("--export-hidden", is_flag=True)
@click.option("--force", is_flag=True)
@click.option("--json", "as_json", is_flag=True)
def cmd_anonymise(checkpoint, data, out, policy, pool_dir, pool_size,
                  fixed_target_id, seed, export_hidden, force, as_json):
    """Anonymise every utterance of a dataset with policy-chosen targets."""
    from .anonymise import TargetPolicy, anonymise_corpus, load_pool, toy_pool

    seed = _seed_default() if seed is None else seed
    _require_empty(out, force)
    manifest = _load_dataset(data)
    pool = load_pool(pool_dir) if pool_dir is not None else toy_pool(pool_size, seed)
    try:
        pol = TargetPolicy(pool=pool, mode=policy, seed=seed, fixed_target_id=fixed_target_id)
    except ValueError as err:
        raise click.UsageError(str(err))
    report = anonymise_corpus(
        manifest, pol, checkpoint, out, root=data, export_hidden=export_hidden
    )
    summary = {
        "out": str(out),
        "utterances": len(report.rows),
        "failed": report.n_failed,
        "policy": policy,
        "seed": seed,
    }
    if as_json:
        _echo_json(summary)
    else:
        click.echo(f"anonymised {summary['utterances'] - summary['failed']}"
                   f"/{summary['utterances']} utterances to {out}")
    if report.n_failed:
        raise RuntimeError(f"{report.n_failed} utterance(s) failed; see {out}/mapping.csv")


# ---------------------------------------------------------------------------


@cli.group("eval")
def cmd_eval():
    """Privacy measurements."""


@cmd_eval.command("eer")
@click.option("--trials", required=True, type=click.Path(exists=True),
              help="CSV of enroll_id,test_id,label,score with label genuine|impostor")
@click.option("--json", "as_json", is_flag=True)
def cmd_eval_eer(trials, as_json):
    """Equal error rate from a trial-list score file."""
    from .evaluation import ScoreSet, compute_eer

    genuine, impostor = [], []
    with open(trials, newline="") as f:
        reader = csv.DictReader(f)
        required = {"enroll_id", "test_id", "label", "score"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"trial list must have columns {sorted(required)}")
        for row in reader:
            label = row["label"].strip().lower()
            if label == "genuine":
                genuine.append(float(row["score"]))
            elif label == "impostor":
                impostor.append(float(row["score"]))
            else:
                raise DataError(f"bad trial label {row['label']!r}")
    if not genuine or not impostor:
        raise DataError("trial list needs both genuine and impostor rows")
    try:
        eer = compute_eer(ScoreSet(np.array(genuine), np.array(impostor)))
    except ValueError as err:
        raise DataError(str(err))
    if as_json:
        _echo_json({"eer": eer, "genuine": len(genuine), "impostor": len(impostor)})
    else:
        click.echo(f"{eer:.6f}")


@cmd_eval.command("probe")
@click.option("--reps", required=True, type=click.Path(exists=True, path_type=Path),
              help="directory of <utt_id>.bin matrices")
@click.option("--labels", "labels_file", required=True, type=click.Path(exists=True),
              help="dataset manifest JSON supplying utt_id -> speaker")
@click.option("--epochs", default=None, type=int)
@click.option("--lr", default=None, type=float)
@click.option("--holdout", default=None, type=float)
@click.option("--seed", default=None, type=int, help="defaults to HFCVP_SEED or 0")
@click.option("--json", "as_json", is_flag=True)
def cmd_eval_probe(reps, labels_file, epochs, lr, holdout, seed, as_json):
    """Train a fresh classifier on stored representations; print held-out accuracy."""
    from .evaluation import ProbeConfig, train_probe

    manifest = DatasetManifest.from_dict(load_json(labels_file))
    pairs = []
    for record in manifest.records:
        path = Path(reps) / f"{record.utt_id}.bin"
        if not path.exists():
            raise DataError(f"missing representation {path}")
        pairs.append((load_matrix(path), record.speaker))
    kwargs = {}
    if epochs is not None:
        kwargs["epochs"] = epochs
    if lr is not None:
        kwargs["lr"] = lr
    if holdout is not None:
        kwargs["holdout"] = holdout
    kwargs["seed"] = _seed_default() if seed is None else seed
    kwargs["num_classes"] = manifest.num_classes
    try:
        acc = train_probe(pairs, ProbeConfig(**kwargs))
    except ValueError as err:
        raise DataError(str(err))
    if as_json:
        _echo_json({"accuracy": acc, "chance": 1.0 / manifest.num_classes})
    else:
        click.echo(f"{acc:.6f}")


# ---------------------------------------------------------------------------


@cli.command("sweep")
@click.option("--data", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--betas", default="0.05,0.06,0.065,0.07", show_default=True)
@click.option("--config", "config_file", default=None, type=click.Path(exists=True))
@click.option("--net-config", "net_config_file", default=None, type=click.Path(exists=True))
@click.option("--preset", default="toy", show_default=True, type=click.Choice(["full", "toy"]))
@click.option("--epochs", default=None, type=int)
@click.option("--batch-size", default=None, type=int)
@click.option("--lr-generator", default=None, type=float)
@click.option("--lr-finder", default=None, type=float)
@click.option("--loss-regime", default=None, type=click.Choice(["mse", "kl"]))
@click.option("--finder-steps", "finder_steps_per_generator_step", default=None, type=int)
@click.option("--seed", default=None, type=int, help="defaults to HFCVP_SEED or 0")
@click.option("--pool-size", default=16, show_default=True, type=int)
@click.option("--force", is_flag=True)
@click.option("--json", "as_json", is_flag=True)
def cmd_sweep(data, out, betas, config_file, net_config_file, preset, seed,
              pool_size, force, as_json, **flags):
    """Train once per beta and report the privacy/utility trade-off."""
    from .evaluation import run_sweep

    try:
        beta_list = [float(b) for b in betas.split(",") if b.strip()]
    except ValueError:
        raise click.UsageError(f"bad --betas value {betas!r}")
    if not beta_list:
        raise click.UsageError("need at least one beta")
    flags["seed"] = _seed_default() if seed is None else seed
    config = _merge_train_config(config_file, flags)
    if max(beta_list) > BETA_STABLE_MAX:
        click.echo(f"warning: beta above the stable range (0.05, {BETA_STABLE_MAX}]", err=True)
    _require_empty(out, force)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _load_dataset(data)
    prior = estimate_prior(manifest.labels(), manifest.num_classes)
    net_cfg = _net_config(preset, net_config_file, manifest.num_classes)
    report = run_sweep(
        beta_list, config, manifest, prior,
        net_config=net_cfg, root=data, out_dir=out, pool_size=pool_size,
    )
    if as_json:
        _echo_json({"rows": [dataclasses.asdict(r) for r in report.rows]})
        return
    click.echo("beta      loss_combiner  loss_leakage  probe_acc  eer       diverged")
    for r in report.rows:
        click.echo(f"{r.beta:<9.4g} {r.loss_combiner:<14.6g} {r.loss_leakage:<13.6g} "
                   f"{r.probe_acc:<10.4g} {r.eer:<9.4g} {int(r.diverged)}")
    ok_rows = [r for r in report.rows if not r.diverged]
    if len(ok_rows) >= 2:
        leak = [r.loss_leakage for r in ok_rows]
        trend = "decreases" if all(b <= a for a, b in zip(leak, leak[1:])) else "is not monotone"
        click.echo(f"note: leakage loss {trend} with beta over completed rows")
    click.echo(f"report written to {out}/sweep.csv")


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return ExitCode.OK
    except click.exceptions.Exit as err:
        return int(err.exit_code)
    except click.UsageError as err:
        err.show(file=sys.stderr)
        return ExitCode.USAGE
    except click.ClickException as err:
        err.show(file=sys.stderr)
        return ExitCode.USAGE
    except click.Abort:
        click.echo("aborted", err=True)
        return ExitCode.USAGE
    except (DataError, CheckpointError, FileNotFoundError, json.JSONDecodeError) as err:
        click.echo(f"data error: {err}", err=True)
        return ExitCode.DATA
    except (DimensionError, RangeError) as err:
        click.echo(f"data error: {err}", err=True)
        return ExitCode.DATA
    except DivergenceError as err:
        click.echo(f"training diverged: {err}", err=True)
        return ExitCode.RUNTIME
    except ValueError as err:
        click.echo(f"config error: {err}", err=True)
        return ExitCode.USAGE
    except RuntimeError as err:
        click.echo(f"runtime error: {err}", err=True)
        return ExitCode.RUNTIME


def entrypoint() -> None:  # console script shim
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
