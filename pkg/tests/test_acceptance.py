"""Acceptance gate: every shipped guarantee as a single pass/fail line.

Run with ``pytest tests/test_acceptance.py -v``; each test prints its
measured numbers so a failure is diagnosable from the log alone.  The
slow end-to-end guarantees (oracle pretrain, variant ordering, iteration
sweep) share session fixtures to keep the whole gate inside a coffee
break on a laptop CPU.
"""

import dataclasses
import json
import os
import time

import numpy as np
import pytest

from udcfer import autodiff as ad
from udcfer import checks, cli
from udcfer import diffusion as df
from udcfer import harness, prior
from udcfer.config import (DataConfig, DegradeConfig, DiffusionConfig,
                           ModelConfig, RunConfig, TrainConfig)
from udcfer.data import ToySpec, generate, load_dataset, save_dataset
from udcfer.degrade import DegradeParams, degrade_dataset
from udcfer.fileio import checkpoint_checksum, read_tnsr, write_tnsr
from udcfer.nn import ParamStore
from udcfer.transformer import (dil_level, dt_block, init_udcformer,
                                window_merge, window_partition)

SEEDS = [0, 1, 2]
DATA_SEED = 5


# ---------------------------------------------------------------------------
# shared configurations
# ---------------------------------------------------------------------------


def _ablation_config() -> RunConfig:
    """Desk-scale setup used for the variant ordering and iteration sweep."""
    cfg = RunConfig()
    cfg.data = DataConfig(num_classes=7, image_size=16, train_size=1200,
                          test_size=500, jitter=0.2)
    cfg.degrade = DegradeConfig(gamma=0.55, blur_sigma=0.65, noise_sigma=0.065)
    cfg.model = ModelConfig(d_label=32, d_image=32, epr_dim=16,
                            channels=(12, 16, 24), blocks_per_level=2,
                            window=4, dil_heads=2, dmnet_heads=1,
                            fusion_dim=32, fusion_heads=2, fpen_hidden=64,
                            fpen_layers=4, time_dim=16, denoiser_hidden=128)
    cfg.diffusion = DiffusionConfig(timesteps=4, beta_start=0.3, beta_end=0.999)
    cfg.train = TrainConfig(lr=1e-3, batch_size=32, epochs=5)
    cfg.validate()
    return cfg


ABLATION_EPOCHS = 40


def _make_udc(cfg: RunConfig, seed: int):
    spec = ToySpec(num_classes=cfg.data.num_classes,
                   image_size=cfg.data.image_size,
                   train_count=cfg.data.train_size,
                   test_count=cfg.data.test_size,
                   seed=seed, jitter=cfg.data.jitter)
    splits = generate(spec)
    p = DegradeParams(gamma=cfg.degrade.gamma,
                      blur_sigma=cfg.degrade.blur_sigma,
                      noise_sigma=cfg.degrade.noise_sigma,
                      seed=seed + 12345)
    return degrade_dataset(splits["train"], p), degrade_dataset(splits["test"], p)


@pytest.fixture(scope="session")
def ablation_setup():
    cfg = _ablation_config()
    tr, te = _make_udc(cfg, DATA_SEED)
    stage1 = harness.stage1_for_seeds(cfg, SEEDS, tr, te)
    return cfg, tr, te, stage1


MICRO = {
    "data": {"num_classes": 7, "image_size": 16, "train_size": 42,
             "test_size": 28, "jitter": 0.15},
    "degrade": {"gamma": 0.7, "blur_sigma": 0.5, "noise_sigma": 0.03},
    "model": {"d_label": 12, "d_image": 12, "epr_dim": 8,
              "channels": [4, 6, 8], "blocks_per_level": 1, "window": 4,
              "dil_heads": 2, "dmnet_heads": 2, "fusion_dim": 12,
              "fusion_heads": 2, "fpen_hidden": 16, "fpen_layers": 2,
              "time_dim": 8, "denoiser_hidden": 16},
    "diffusion": {"timesteps": 2, "beta_start": 0.3, "beta_end": 0.99995},
    "train": {"lr": 0.001, "batch_size": 14, "epochs": 2},
}


@pytest.fixture(scope="session")
def micro_pipeline(tmp_path_factory):
    """gen-data -> train-stage1 -> train-stage2 -> infer, all through cli."""
    root = tmp_path_factory.mktemp("acceptance_cli")
    cfg_path = root / "micro.json"
    cfg_path.write_text(json.dumps(MICRO))
    data_dir = root / "data"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--seed", "9",
                     "--out", str(data_dir)]) == 0
    s1 = root / "s1"
    assert cli.main(["train-stage1", "--config", str(cfg_path), "--seed", "9",
                     "--data", str(data_dir), "--out", str(s1)]) == 0
    s2 = root / "s2"
    assert cli.main(["train-stage2", "--config", str(cfg_path), "--seed", "9",
                     "--data", str(data_dir),
                     "--stage1", str(s1 / "checkpoint"),
                     "--out", str(s2)]) == 0
    return {"root": root, "cfg": str(cfg_path), "data": str(data_dir),
            "s1": str(s1), "s2": str(s2)}


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------


def test_01_gradient_check_all_blocks_and_losses():
    t0 = time.perf_counter()
    report = checks.run_gradcheck(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r["max_rel_err"] for r in report)
    for r in report:
        print(f"  {r['block']:<14} max_rel_err={r['max_rel_err']:.3e}")
    print(f"  worst={worst:.3e} elapsed={elapsed:.1f}s blocks={len(report)}")
    assert worst < 1e-4, f"worst relative gradient error {worst:.3e}"
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. diffusion statistics
# ---------------------------------------------------------------------------


def test_02_forward_statistics_and_reverse_hand_value():
    sched = df.make_schedule(4, 0.3, 0.999)
    ab = float(sched.alpha_bar[-1])
    rng = np.random.default_rng(77)
    C, N = 8, 100_000
    z_row = rng.normal(size=(1, C))
    z = ad.constant(np.tile(z_row, (N, 1)))
    z_T = df.forward_diffuse(z, sched, rng=np.random.default_rng(123)).data
    mean_err = np.abs(z_T.mean(axis=0) - np.sqrt(ab) * z_row[0])
    se_mean = np.sqrt((1.0 - ab) / N)
    centered = z_T - np.sqrt(ab) * z_row
    var = float(np.mean(centered ** 2))
    se_var = (1.0 - ab) * np.sqrt(2.0 / (N * C - 1))
    print(f"  mean_err_max={mean_err.max():.2e} (3se={3*se_mean:.2e}) "
          f"var={var:.6f} target={1-ab:.6f} (3se={3*se_var:.2e})")
    assert np.all(mean_err <= 3.0 * se_mean)
    assert abs(var - (1.0 - ab)) <= 3.0 * se_var

    hand = df.DiffusionSchedule(beta=np.array([0.25]), alpha=np.array([0.75]),
                                alpha_bar=np.array([0.75]))
    out = df.reverse_step(ad.constant(np.array([[1.0]])), 1,
                          ad.constant(np.array([[0.0]])), hand,
                          lambda z_t, t, x: ad.constant(np.array([[0.5]])))
    got = float(out.data[0, 0])
    expect = (1.0 - 0.25 * 0.5) / np.sqrt(0.75)
    print(f"  reverse_step={got!r} expected={expect!r}")
    assert abs(got - 1.0103629710818451) <= 1e-9


# ---------------------------------------------------------------------------
# 3. oracle-conditioned pretraining accuracy
# ---------------------------------------------------------------------------


def test_03_stage1_reaches_99_percent():
    cfg = RunConfig()
    cfg.train = dataclasses.replace(cfg.train, epochs=4)
    cfg.validate()
    tr, te = _make_udc(cfg, DATA_SEED)
    t0 = time.perf_counter()
    _, metrics = harness.train_stage1(cfg, 0, tr, te, quiet=True)
    elapsed = time.perf_counter() - t0
    best = max(m["test_acc"] for m in metrics)
    print(f"  per-epoch={[round(m['test_acc'], 4) for m in metrics]} "
          f"elapsed={elapsed:.0f}s")
    assert cfg.train.epochs <= 30
    assert best >= 0.99, f"stage-1 test accuracy {best:.4f}"
    assert elapsed < 600.0, f"stage-1 took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# 4. variant ordering
# ---------------------------------------------------------------------------


def test_04_diffusion_variants_beat_direct_injection(ablation_setup):
    cfg, tr, te, stage1 = ablation_setup
    rows = harness.run_ablation(cfg, SEEDS, tr, te, stage1=stage1,
                                s2_epochs=ABLATION_EPOCHS)
    acc = {r["variant"]: r["acc"] for r in rows}
    for r in rows:
        print(f"  {r['variant']}: median={r['acc']:.4f} accs={r['accs']}")
    for name in ("V2", "V3", "V4"):
        gap = acc[name] - acc["V1"]
        assert gap >= 0.01, (f"{name} median {acc[name]:.4f} beats V1 "
                             f"{acc['V1']:.4f} by {gap*100:.2f} < 1 point")


# ---------------------------------------------------------------------------
# 5. iteration rise and plateau
# ---------------------------------------------------------------------------


def test_05_iteration_count_rises_then_plateaus(ablation_setup):
    cfg, tr, te, stage1 = ablation_setup
    points = harness.sweep_iterations(cfg, SEEDS, tr, te, t_values=(1, 4, 32),
                                      stage1=stage1, s2_epochs=ABLATION_EPOCHS)
    acc = {p["T"]: p["acc"] for p in points}
    for p in points:
        print(f"  T={p['T']}: median={p['acc']:.4f} accs={p['accs']} "
              f"beta_end={p['beta_end']:.6f} {p['note']}")
    rise = acc[4] - acc[1]
    drift = abs(acc[4] - acc[32])
    assert rise >= 0.01, f"acc(T=4)-acc(T=1) = {rise*100:.2f} points"
    assert drift <= 0.005, f"|acc(T=4)-acc(T=32)| = {drift*100:.2f} points"


# ---------------------------------------------------------------------------
# 6. inference never reads stored labels
# ---------------------------------------------------------------------------


def test_06_label_permutation_changes_no_prediction(micro_pipeline):
    mp = micro_pipeline
    test_dir = os.path.join(mp["data"], "test")
    inf1 = os.path.join(mp["root"], "inf1")
    assert cli.main(["infer", "--config", mp["cfg"], "--seed", "9",
                     "--data", test_dir,
                     "--checkpoint", os.path.join(mp["s2"], "checkpoint"),
                     "--out", inf1]) == 0
    ds = load_dataset(test_dir)
    rng = np.random.default_rng(4242)
    ds.labels[:] = rng.permutation(ds.labels)
    save_dataset(ds, test_dir)
    inf2 = os.path.join(mp["root"], "inf2")
    assert cli.main(["infer", "--config", mp["cfg"], "--seed", "9",
                     "--data", test_dir,
                     "--checkpoint", os.path.join(mp["s2"], "checkpoint"),
                     "--out", inf2]) == 0

    def preds(path):
        with open(os.path.join(path, "predictions.csv")) as fh:
            rows = [ln.strip().split(",") for ln in fh][1:]
        return [r[1] for r in rows]

    a, b = preds(inf1), preds(inf2)
    changed = sum(x != y for x, y in zip(a, b))
    print(f"  predictions={len(a)} changed_after_label_permutation={changed}")
    assert len(a) == MICRO["data"]["test_size"]
    assert changed == 0


# ---------------------------------------------------------------------------
# 7. bitwise reproducibility
# ---------------------------------------------------------------------------


def test_07_same_config_same_seed_bit_identical(micro_pipeline, tmp_path):
    mp = micro_pipeline
    runs = []
    for tag in ("a", "b"):
        s1 = tmp_path / f"s1_{tag}"
        assert cli.main(["train-stage1", "--config", mp["cfg"], "--seed", "9",
                         "--data", mp["data"], "--out", str(s1)]) == 0
        s2 = tmp_path / f"s2_{tag}"
        assert cli.main(["train-stage2", "--config", mp["cfg"], "--seed", "9",
                         "--data", mp["data"],
                         "--stage1", str(s1 / "checkpoint"),
                         "--out", str(s2)]) == 0
        runs.append({
            "m1": (s1 / "metrics.jsonl").read_bytes(),
            "m2": (s2 / "metrics.jsonl").read_bytes(),
            "c1": checkpoint_checksum(str(s1 / "checkpoint")),
            "c2": checkpoint_checksum(str(s2 / "checkpoint")),
        })
    print(f"  stage1_ckpt={runs[0]['c1'][:16]} stage2_ckpt={runs[0]['c2'][:16]}")
    assert runs[0]["m1"] == runs[1]["m1"]
    assert runs[0]["m2"] == runs[1]["m2"]
    assert runs[0]["c1"] == runs[1]["c1"]
    assert runs[0]["c2"] == runs[1]["c2"]


# ---------------------------------------------------------------------------
# 8. invariant bundle
# ---------------------------------------------------------------------------


def test_08_invariant_suite():
    rng = np.random.default_rng(2024)

    # softmax rows are probability vectors
    z = ad.constant(rng.normal(size=(50, 11)) * 3.0)
    p = ad.softmax(z, axis=-1).data
    assert np.all(p > 0) and np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    pn = prior.epr_norm(ad.constant(rng.normal(size=(20, 9)))).data
    assert np.allclose(pn.sum(axis=-1), 1.0, atol=1e-12)

    # divergence between normalized priors: non-negative, zero iff equal
    worst = np.inf
    for _ in range(100):
        a = ad.constant(rng.normal(size=(4, 7)))
        b = ad.constant(rng.normal(size=(4, 7)))
        val = float(ad.softmax_kl(a, b).data)
        assert val > 0.0
        worst = min(worst, val)
        same = float(ad.softmax_kl(a, a).data)
        assert abs(same) < 1e-12
    print(f"  kl: min_over_100_random_pairs={worst:.3e}, self-kl < 1e-12")

    # residual blocks at zero weights are exact identities
    mcfg = ModelConfig(d_label=8, d_image=8, epr_dim=6, channels=(4, 6, 8),
                       blocks_per_level=1, window=4, dil_heads=2,
                       dmnet_heads=2, fusion_dim=12, fusion_heads=2,
                       fpen_hidden=8, fpen_layers=2, time_dim=8,
                       denoiser_hidden=8)
    store = ParamStore(seed=7)
    init_udcformer(store, mcfg, 7, 16)
    for name, par in store.items():
        if name.startswith(("udc.level1.block1.", "udc.level1.mod.",
                            "dil.level1.")):
            par.data[...] = 0.0
    f = rng.normal(size=(2, 4, 4, 4))
    zv = rng.normal(size=(2, mcfg.epr_dim))
    out = dt_block(store, ad.constant(f), ad.constant(zv), 1, 1, heads=2)
    assert np.array_equal(out.data, f)
    f_flm = rng.normal(size=(2, 4, 4, 4))
    out2 = dil_level(store, ad.constant(f), ad.constant(f_flm), 1, mcfg, 16)
    assert np.array_equal(out2.data, f)

    # window partition/merge round trip is bit-exact
    x = rng.normal(size=(3, 8, 8))
    back = window_merge(window_partition(ad.constant(x), 4), 4, 8, 8)
    assert np.array_equal(back.data, x)

    # array serialization round trip is bit-exact
    import tempfile
    with tempfile.TemporaryDirectory() as td:
        arr = rng.normal(size=(5, 3, 2))
        path = os.path.join(td, "x.tnsr")
        write_tnsr(path, arr, "f64")
        assert np.array_equal(read_tnsr(path), arr)
    print("  softmax rows, kl sign, zero-weight identities, window and "
          "tnsr round trips: all hold")


# ---------------------------------------------------------------------------
# 9. degradation contract
# ---------------------------------------------------------------------------


def test_09_brightness_ratio_tracks_gamma_and_identity_is_exact():
    spec = ToySpec(num_classes=7, image_size=16, train_count=1000,
                   test_count=7, seed=31, jitter=0.2)
    clean = generate(spec)["train"]
    p = DegradeParams(gamma=0.7, blur_sigma=0.8, noise_sigma=0.02, seed=99)
    udc = degrade_dataset(clean, p)
    ratio = float(udc.udc.mean() / clean.images.mean())
    print(f"  mean-brightness ratio={ratio:.5f} gamma={p.gamma}")
    assert abs(ratio - p.gamma) <= 0.01 * p.gamma

    ident = DegradeParams(gamma=1.0, blur_sigma=0.0, noise_sigma=0.0, seed=99)
    same = degrade_dataset(clean, ident)
    assert np.array_equal(same.udc, clean.images)
    print("  identity parameters reproduce the clean images bit-exactly")
