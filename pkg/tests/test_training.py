import dataclasses
import math

import numpy as np
import pytest
import torch

from hfcvp.core import TrainConfig
from hfcvp.data import make_batches
from hfcvp.networks import NetworkConfig, load_checkpoint
from hfcvp.training import (
    DivergenceError,
    EpochMetrics,
    MetricsLog,
    lr_at,
    lr_range_test,
    make_state,
    parameter_fingerprint,
    run_training,
    train_step_finder,
    train_step_generator,
)


def _one_batch(toy_dataset, n=8):
    return next(iter(make_batches(toy_dataset["manifest"], n, 0, features=toy_dataset["features"])))


def _fresh_state(toy_dataset, tiny_net_cfg, **overrides):
    cfg = TrainConfig(**{"batch_size": 8, "epochs": 2, "seed": 0, **overrides})
    torch.manual_seed(cfg.seed)
    return make_state(cfg, tiny_net_cfg, toy_dataset["prior"])


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_lr_at_examples():
    cfg = TrainConfig(lr_generator=2e-4, lr_finder=1e-4, decay_gamma=0.999, decay_start_epoch=100)
    assert lr_at(1, cfg) == (2e-4, 1e-4)
    assert lr_at(100, cfg) == (2e-4, 1e-4)
    g, f = lr_at(101, cfg)
    assert abs(g - 2e-4 * 0.999) < 1e-12 and abs(f - 1e-4 * 0.999) < 1e-12
    g, _ = lr_at(110, cfg)
    assert abs(g - 2e-4 * 0.999**10) < 1e-15
    const = TrainConfig(decay_gamma=1.0)
    assert lr_at(1, const) == lr_at(500, const)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


# ---------------------------------------------------------------------------
# gradient isolation


def test_finder_step_isolates_generator(toy_dataset, tiny_net_cfg):
    state = _fresh_state(toy_dataset, tiny_net_cfg)
    batch = _one_batch(toy_dataset)
    for _ in range(10):
        fp_h = parameter_fingerprint(state.nets["hider"])
        fp_c = parameter_fingerprint(state.nets["combiner"])
        fp_f = parameter_fingerprint(state.nets["finder"])
        train_step_finder(state, batch)
        assert parameter_fingerprint(state.nets["hider"]) == fp_h
        assert parameter_fingerprint(state.nets["combiner"]) == fp_c
        assert parameter_fingerprint(state.nets["finder"]) != fp_f


def test_generator_step_isolates_finder(toy_dataset, tiny_net_cfg):
    state = _fresh_state(toy_dataset, tiny_net_cfg)
    batch = _one_batch(toy_dataset)
    for _ in range(10):
        fp_f = parameter_fingerprint(state.nets["finder"])
        fp_h = parameter_fingerprint(state.nets["hider"])
        recon, leak, total = train_step_generator(state, batch)
        assert parameter_fingerprint(state.nets["finder"]) == fp_f
        assert parameter_fingerprint(state.nets["hider"]) != fp_h
        assert total == recon + state.config.beta * leak  # exact decomposition
        assert leak >= 0.0
    # finder grads stay usable after the generator froze them temporarily
    assert all(p.requires_grad for p in state.nets["finder"].parameters())


def test_finder_step_ignores_beta(toy_dataset, tiny_net_cfg):
    batch = _one_batch(toy_dataset)
    outs = []
    for beta in (0.0, 0.07):
        state = _fresh_state(toy_dataset, tiny_net_cfg, beta=beta)
        loss = train_step_finder(state, batch)
        outs.append((loss, parameter_fingerprint(state.nets["finder"])))
    assert outs[0] == outs[1]


def test_generator_beta_zero_matches_pure_autoencoder(toy_dataset, tiny_net_cfg):
    """At beta=0 the leakage term contributes zero gradient, so the update
    equals an autoencoder-only step under the same starting point."""
    batch = _one_batch(toy_dataset)
    state_a = _fresh_state(toy_dataset, tiny_net_cfg, beta=0.0)
    train_step_generator(state_a, batch)

    state_b = _fresh_state(toy_dataset, tiny_net_cfg, beta=0.0)
    from hfcvp import losses

    h = state_b.nets["hider"](batch.features, batch.mask)
    pre, post = state_b.nets["combiner"](h, batch.embeddings, batch.mask)
    recon = losses.reconstruction_mse(pre, batch.features, batch.mask) + \
        losses.reconstruction_mse(post, batch.features, batch.mask)
    opt = state_b.optimizers["generator"]
    opt.zero_grad()
    recon.backward()
    torch.nn.utils.clip_grad_norm_(
        [p for g in opt.param_groups for p in g["params"]], state_b.config.grad_clip
    )
    opt.step()
    assert parameter_fingerprint(state_a.nets["hider"]) == parameter_fingerprint(state_b.nets["hider"])
    assert parameter_fingerprint(state_a.nets["combiner"]) == parameter_fingerprint(state_b.nets["combiner"])


# ---------------------------------------------------------------------------
# overfit oracles


def test_finder_overfits_fixed_batch(toy_dataset, tiny_net_cfg):
    state = _fresh_state(toy_dataset, tiny_net_cfg, lr_finder=2e-3)
    batch = _one_batch(toy_dataset)
    first = np.mean([train_step_finder(state, batch) for _ in range(20)])
    for _ in range(180):
        last = train_step_finder(state, batch)
    assert last < first


def test_generator_overfits_fixed_batch(toy_dataset, tiny_net_cfg):
    state = _fresh_state(toy_dataset, tiny_net_cfg, beta=0.0, lr_generator=2e-3)
    batch = _one_batch(toy_dataset)
    initial = train_step_generator(state, batch)[0]
    for _ in range(499):
        recon = train_step_generator(state, batch)[0]
    assert recon < 0.01 * initial


def test_kl_regime_steps(toy_dataset, tiny_net_cfg):
    state = _fresh_state(toy_dataset, tiny_net_cfg, loss_regime="kl")
    batch = _one_batch(toy_dataset)
    lf = train_step_finder(state, batch)
    assert math.isfinite(lf) and lf > 0
    recon, leak, total = train_step_generator(state, batch)
    # KL leakage is bounded below by the prior's entropy (uniform over 4)
    assert leak >= math.log(4) - 1e-6
    assert abs(total - (recon + state.config.beta * leak)) < 1e-6


# ---------------------------------------------------------------------------
# divergence


def test_divergence_error_from_poisoned_params(toy_dataset, tiny_net_cfg):
    state = _fresh_state(toy_dataset, tiny_net_cfg)
    batch = _one_batch(toy_dataset)
    with torch.no_grad():
        for p in state.nets["finder"].parameters():
            p.fill_(float("nan"))
    with pytest.raises(DivergenceError) as info:
        train_step_finder(state, batch)
    assert "loss_finder" in info.value.snapshot


def test_run_training_aborts_on_divergence(toy_dataset, tiny_net_cfg, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=8, seed=0, lr_generator=1e30, lr_finder=1e30,
                      grad_clip=1e30, checkpoint_every=1)
    with pytest.raises(DivergenceError, match="3 consecutive"):
        run_training(
            cfg, toy_dataset["manifest"], toy_dataset["prior"],
            net_config=tiny_net_cfg, features=toy_dataset["features"],
            out_dir=tmp_path / "div",
        )
    assert (tmp_path / "div" / "ckpt_diverged" / "manifest.json").exists()


# ---------------------------------------------------------------------------
# full loop: metrics, checkpoints, resume, reproducibility


@pytest.fixture(scope="module")
def short_run(toy_dataset, tiny_net_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("short_run")
    cfg = TrainConfig(epochs=4, batch_size=8, seed=3, beta=0.05, checkpoint_every=2)
    log = run_training(
        cfg, toy_dataset["manifest"], toy_dataset["prior"],
        net_config=tiny_net_cfg, features=toy_dataset["features"], out_dir=out,
    )
    return {"out": out, "log": log, "cfg": cfg}


def test_metrics_log_contents(short_run):
    log = short_run["log"]
    assert [r.epoch for r in log.rows] == [1, 2, 3, 4]
    for r in log.rows:
        assert math.isfinite(r.loss_combiner) and math.isfinite(r.loss_finder)
        assert r.loss_leakage >= 0.0
        assert r.lr_g == 2e-4 and r.lr_f == 1e-4  # before decay start


def test_metrics_csv_roundtrip(short_run):
    path = short_run["out"] / "metrics.csv"
    header = path.read_text().splitlines()[0]
    assert header == "epoch,lr_g,lr_f,loss_combiner,loss_leakage,loss_finder,probe_acc"
    back = MetricsLog.read_csv(path)
    for a, b in zip(back.rows, short_run["log"].rows):
        assert a.epoch == b.epoch
        assert abs(a.loss_combiner - b.loss_combiner) < 1e-9
    assert (short_run["out"] / "metrics.jsonl").exists()


def test_metrics_log_rejects_nonincreasing():
    log = MetricsLog()
    log.append(EpochMetrics(1, 1e-4, 1e-4, 1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        log.append(EpochMetrics(1, 1e-4, 1e-4, 1.0, 0.0, 1.0))


def test_checkpoint_files_written(short_run):
    out = short_run["out"]
    for tag in ("ckpt_epoch_0002", "ckpt_epoch_0004", "ckpt_final", "ckpt_best"):
        assert (out / tag / "manifest.json").exists(), tag
    loaded, cfg, manifest = load_checkpoint(out / "ckpt_final")
    assert manifest["epoch"] == 4
    assert manifest["train_config"]["beta"] == 0.05


def test_reproducibility_same_seed(toy_dataset, tiny_net_cfg, short_run):
    log2 = run_training(
        short_run["cfg"], toy_dataset["manifest"], toy_dataset["prior"],
        net_config=tiny_net_cfg, features=toy_dataset["features"],
    )
    for a, b in zip(short_run["log"].rows, log2.rows):
        assert abs(a.loss_combiner - b.loss_combiner) < 1e-6
        assert abs(a.loss_leakage - b.loss_leakage) < 1e-6
        assert abs(a.loss_finder - b.loss_finder) < 1e-6


def test_resume_bit_exact(toy_dataset, tiny_net_cfg, short_run, tmp_path):
    """Resuming from the epoch-2 checkpoint reproduces epochs 3-4 exactly."""
    resumed_out = tmp_path / "resumed"
    log2, state2 = run_training(
        short_run["cfg"], toy_dataset["manifest"], toy_dataset["prior"],
        net_config=tiny_net_cfg, features=toy_dataset["features"],
        out_dir=resumed_out,
        resume_from=short_run["out"] / "ckpt_epoch_0002",
        return_state=True,
    )
    assert [r.epoch for r in log2.rows] == [3, 4]
    full = {r.epoch: r for r in short_run["log"].rows}
    for r in log2.rows:
        assert abs(r.loss_combiner - full[r.epoch].loss_combiner) < 1e-6
        assert abs(r.loss_finder - full[r.epoch].loss_finder) < 1e-6
    ref, _, _ = load_checkpoint(short_run["out"] / "ckpt_final")
    for name in ("hider", "finder", "combiner"):
        assert parameter_fingerprint(state2.nets[name]) == parameter_fingerprint(ref[name])


def test_lr_range_test_runs(toy_dataset, tiny_net_cfg):
    cfg = TrainConfig(batch_size=8, seed=0)
    curve, suggestion = lr_range_test(
        cfg, toy_dataset["manifest"], toy_dataset["prior"],
        net_config=tiny_net_cfg, features=toy_dataset["features"],
        steps=20, lr_min=1e-5, lr_max=1e-1,
    )
    assert len(curve) >= 5
    lrs = [p[0] for p in curve]
    assert lrs == sorted(lrs)
    assert 1e-7 < suggestion < 1e-1
    with pytest.raises(ValueError):
        lr_range_test(cfg, toy_dataset["manifest"], toy_dataset["prior"],
                      net_config=tiny_net_cfg, features=toy_dataset["features"], side="nope")
