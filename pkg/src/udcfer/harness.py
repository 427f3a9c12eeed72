"""Training, evaluation, ablation matrix, iteration sweep, feature export.

Stage 1 trains the encoders, the stage-1 prior net and the classifier
jointly with cross-entropy; the prior is computed from the true label,
so stage-1 accuracy is an oracle-mode sanity number.  Stage 2 freezes
the stage-1 prior path and trains the conditional prior net, the
denoiser and the classifier end to end through the reverse chain.

Everything is deterministic in (config, seed): shuffling, diffusion
noise and evaluation noise all come from SeedSequence streams keyed by
the run seed and a fixed role tag.
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import diffusion as df
from . import encoders as enc
from . import prior
from . import transformer as tf
from . import fileio
from .config import RunConfig
from .data import Dataset
from .errors import DataError, NumericError
from .nn import Adam, ParamStore

# role tags for independent random streams derived from one run seed
_TAG_SHUFFLE = 101
_TAG_TRAIN_NOISE = 303
_TAG_EVAL_NOISE = 202


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray     # [M, M], rows = true class, cols = predicted
    predictions: np.ndarray   # [N]
    features: Optional[np.ndarray] = None


def build_store(cfg: RunConfig, num_classes: int, image_size: int, seed: int,
                stage: int, use_diffusion: bool = True) -> ParamStore:
    store = ParamStore(seed)
    m = cfg.model
    enc.init_label_encoder(store, num_classes, m.d_label)
    enc.init_image_encoder(store, m)
    enc.init_landmark_encoder(store, m)
    prior._init_mlp(store, "fpen.s1", m.d_label + m.d_image,
                    m.fpen_hidden, m.epr_dim, m.fpen_layers)
    tf.init_udcformer(store, m, num_classes, image_size)
    if stage == 2:
        prior._init_mlp(store, "fpen.s2", m.d_image,
                        m.fpen_hidden, m.epr_dim, m.fpen_layers)
        if use_diffusion:
            df.init_denoiser(store, m)
    return store


def _batches(n: int, batch_size: int, order: np.ndarray) -> List[np.ndarray]:
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _encode_common(store: ParamStore, cfg: RunConfig, ds: Dataset,
                   idx: np.ndarray) -> Dict:
    x = ad.constant(ds.udc[idx])
    hm = ad.constant(ds.landmarks[idx])
    return {
        "x": x,
        "landmark_feats": enc.encode_landmarks(store, hm),
        "image_feat": enc.encode_image(store, x),
        "labels": ds.labels[idx],
    }


def _oracle_prior(store: ParamStore, cfg: RunConfig, batch: Dict,
                  num_classes: int):
    lab = enc.encode_label(store, batch["labels"], num_classes)
    return prior.fpen_s1(store, lab, batch["image_feat"],
                         layers=cfg.model.fpen_layers)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(store: ParamStore, cfg: RunConfig, ds: Dataset, mode: str,
             seed: int, schedule: Optional[df.DiffusionSchedule] = None,
             want_features: bool = False) -> EvalResult:
    """Pure forward evaluation; never reads labels on the stage-2 path.

    Modes: ``stage1`` rebuilds the oracle prior from the true label (the
    stage-1 training condition); ``stage2`` starts the reverse chain from
    seeded unit noise (or zeros when the run trained without inserted
    noise) conditioned on the image; ``prior`` feeds the conditional
    vector directly as the prior (the no-diffusion baseline).
    """
    if len(ds) == 0:
        raise DataError("evaluate: empty dataset split")
    n = len(ds)
    m = ds.num_classes
    bs = cfg.train.batch_size

    if mode == "stage2":
        if schedule is None:
            raise DataError("evaluate: stage2 mode needs a schedule")
        if cfg.diffusion.insert_noise:
            rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), _TAG_EVAL_NOISE]))
            start = rng.standard_normal((n, cfg.model.epr_dim))
        else:
            start = np.zeros((n, cfg.model.epr_dim))
        denoiser = df.make_denoiser(store, cfg.model, schedule,
                                    cfg.diffusion.ddpm_coeff)

    preds = np.empty(n, dtype=np.int64)
    feats = np.empty((n, cfg.model.fusion_dim)) if want_features else None
    for idx in _batches(n, bs, np.arange(n)):
        batch = _encode_common(store, cfg, ds, idx)
        if mode == "stage1":
            z = _oracle_prior(store, cfg, batch, m)
        elif mode == "prior":
            z = prior.fpen_s2(store, batch["image_feat"], layers=cfg.model.fpen_layers)
        elif mode == "stage2":
            x_s2 = prior.fpen_s2(store, batch["image_feat"],
                                 layers=cfg.model.fpen_layers)
            z = df.reverse_chain(ad.constant(start[idx]), x_s2, schedule,
                                 denoiser, cfg.diffusion.ddpm_coeff)
        else:
            raise DataError(f"evaluate: unknown mode '{mode}'")
        logits, pen = tf.forward_features(store, batch["x"], z,
                                          batch["landmark_feats"], cfg.model)
        preds[idx] = tf.predict(logits.data)
        if want_features:
            feats[idx] = pen.data

    confusion = np.zeros((m, m), dtype=np.int64)
    np.add.at(confusion, (ds.labels, preds), 1)
    acc = float(np.mean(preds == ds.labels))
    return EvalResult(accuracy=acc, confusion=confusion, predictions=preds,
                      features=feats)


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def _metric_writers(out_dir: Optional[str]):
    if out_dir is None:
        return None, None
    os.makedirs(out_dir, exist_ok=True)
    return (fileio.JsonlWriter(os.path.join(out_dir, "metrics.jsonl")),
            fileio.JsonlWriter(os.path.join(out_dir, "timing.jsonl")))


def _finish_epoch(metrics: List[dict], writers, epoch: int, ce: float,
                  kl: float, train_acc: float, test_acc: float,
                  wall_ms: float) -> None:
    rec = {"epoch": epoch, "ce": ce, "kl": kl, "loss": ce + kl,
           "train_acc": train_acc, "test_acc": test_acc}
    metrics.append(rec)
    mw, tw = writers
    if mw is not None:
        mw.write(rec)
        tw.write({"epoch": epoch, "wall_ms": wall_ms})


def train_stage1(cfg: RunConfig, seed: int, train_ds: Dataset,
                 test_ds: Dataset, out_dir: Optional[str] = None,
                 quiet: bool = True) -> Tuple[ParamStore, List[dict]]:
    """Joint supervised pretraining of encoders, prior net and classifier."""
    if len(train_ds) == 0:
        raise DataError("train_stage1: empty dataset")
    if train_ds.udc is None:
        raise DataError("train_stage1: dataset has no degraded images")
    m = train_ds.num_classes
    store = build_store(cfg, m, train_ds.image_size, seed, stage=1)
    opt = Adam(store, lr=cfg.train.lr, betas=(cfg.train.beta1, cfg.train.beta2),
               weight_decay=cfg.train.weight_decay, grad_clip=cfg.train.grad_clip)
    writers = _metric_writers(out_dir)
    metrics: List[dict] = []
    n = len(train_ds)
    for epoch in range(cfg.train.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng(
            np.random.SeedSequence([int(seed), _TAG_SHUFFLE, epoch])).permutation(n)
        ce_sum, acc_sum, seen = 0.0, 0.0, 0
        for idx in _batches(n, cfg.train.batch_size, order):
            batch = _encode_common(store, cfg, train_ds, idx)
            z = _oracle_prior(store, cfg, batch, m)
            logits = tf.classify(store, batch["x"], z, batch["landmark_feats"],
                                 cfg.model)
            ce = tf.cross_entropy(logits, batch["labels"])
            grads = ad.backward(ce, parameters=store.trainable())
            opt.step(grads)
            ce_sum += ce.item() * len(idx)
            acc_sum += float(np.sum(tf.predict(logits.data) == batch["labels"]))
            seen += len(idx)
        test = evaluate(store, cfg, test_ds, "stage1", seed)
        wall = (time.perf_counter() - t0) * 1e3
        _finish_epoch(metrics, writers, epoch, ce_sum / seen, 0.0,
                      acc_sum / seen, test.accuracy, wall)
        if not quiet:
            print(f"stage1 epoch {epoch}: ce {ce_sum / seen:.4f} "
                  f"test_acc {test.accuracy:.4f}")
    for w in writers:
        if w is not None:
            w.close()
    if out_dir is not None:
        save_run_checkpoint(store, cfg, seed, out_dir, stage=1,
                            num_classes=m, image_size=train_ds.image_size)
    return store, metrics


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


def _check_stage1_arrays(store: ParamStore, arrays: Dict[str, np.ndarray]) -> None:
    fresh = ("fpen.s2.", "diff.denoiser.")
    for name in store:
        if any(name.startswith(p) for p in fresh):
            continue
        if name not in arrays:
            raise DataError(f"stage-1 checkpoint missing parameter '{name}'")


def train_stage2(cfg: RunConfig, seed: int, train_ds: Dataset, test_ds: Dataset,
                 stage1_arrays: Dict[str, np.ndarray],
                 out_dir: Optional[str] = None,
                 quiet: bool = True) -> Tuple[ParamStore, List[dict]]:
    """Train the conditional prior, denoiser and classifier through the
    reverse chain, with the stage-1 prior path frozen."""
    if len(train_ds) == 0:
        raise DataError("train_stage2: empty dataset")
    m = train_ds.num_classes
    use_diff = cfg.train.use_diffusion
    store = build_store(cfg, m, train_ds.image_size, seed, stage=2,
                        use_diffusion=use_diff)
    _check_stage1_arrays(store, stage1_arrays)
    store.load_arrays(stage1_arrays, strict=False)

    frozen = ["fpen.s1.", "enc.label."]
    if cfg.train.freeze_encoders:
        frozen += ["enc.image.", "enc.flm."]
    store.freeze(frozen)

    schedule = None
    if use_diff:
        schedule = df.make_schedule(cfg.diffusion.timesteps,
                                    cfg.diffusion.beta_start,
                                    cfg.diffusion.beta_end)
    opt = Adam(store, lr=cfg.train.lr, betas=(cfg.train.beta1, cfg.train.beta2),
               weight_decay=cfg.train.weight_decay, grad_clip=cfg.train.grad_clip)
    noise_rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), _TAG_TRAIN_NOISE]))
    writers = _metric_writers(out_dir)
    metrics: List[dict] = []
    eval_mode = "stage2" if use_diff else "prior"
    n = len(train_ds)
    for epoch in range(cfg.train.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng(
            np.random.SeedSequence([int(seed), _TAG_SHUFFLE, epoch])).permutation(n)
        ce_sum, kl_sum, acc_sum, seen = 0.0, 0.0, 0.0, 0
        for idx in _batches(n, cfg.train.batch_size, order):
            batch = _encode_common(store, cfg, train_ds, idx)
            batch["z_prior"] = _oracle_prior(store, cfg, batch, m).detach()
            batch["x_s2"] = prior.fpen_s2(store, batch["image_feat"],
                                          layers=cfg.model.fpen_layers)
            stats = df.stage2_train_step(
                store, cfg.model, batch, schedule, opt, noise_rng,
                use_diffusion=use_diff, use_kl=cfg.train.use_kl,
                insert_noise=cfg.diffusion.insert_noise,
                ddpm_coeff=cfg.diffusion.ddpm_coeff)
            ce_sum += stats["ce"] * len(idx)
            kl_sum += stats["kl"] * len(idx)
            acc_sum += stats["acc"] * len(idx)
            seen += len(idx)
        test = evaluate(store, cfg, test_ds, eval_mode, seed, schedule)
        wall = (time.perf_counter() - t0) * 1e3
        _finish_epoch(metrics, writers, epoch, ce_sum / seen, kl_sum / seen,
                      acc_sum / seen, test.accuracy, wall)
        if not quiet:
            print(f"stage2 epoch {epoch}: ce {ce_sum / seen:.4f} "
                  f"kl {kl_sum / seen:.4f} test_acc {test.accuracy:.4f}")
    for w in writers:
        if w is not None:
            w.close()
    if out_dir is not None:
        save_run_checkpoint(store, cfg, seed, out_dir, stage=2,
                            num_classes=m, image_size=train_ds.image_size)
    return store, metrics


def save_run_checkpoint(store: ParamStore, cfg: RunConfig, seed: int,
                        out_dir: str, stage: int, num_classes: int,
                        image_size: int) -> str:
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    fileio.save_checkpoint(
        ckpt_dir, store.arrays(), cfg.sha256(),
        epr_dim=cfg.model.epr_dim, timesteps=cfg.diffusion.timesteps,
        extra={"stage": stage, "num_classes": num_classes,
               "image_size": image_size, "seed": int(seed),
               "use_diffusion": bool(cfg.train.use_diffusion),
               "insert_noise": bool(cfg.diffusion.insert_noise),
               "ddpm_coeff": bool(cfg.diffusion.ddpm_coeff)})
    return ckpt_dir


def load_run_checkpoint(cfg: RunConfig, ckpt_dir: str) -> Tuple[ParamStore, dict]:
    """Rebuild a store matching a saved checkpoint and load its weights."""
    arrays, manifest = fileio.load_checkpoint(ckpt_dir)
    if manifest["epr_dim"] != cfg.model.epr_dim:
        raise DataError(f"checkpoint prior dim {manifest['epr_dim']} != "
                        f"config {cfg.model.epr_dim}")
    store = build_store(cfg, manifest["num_classes"], manifest["image_size"],
                        manifest.get("seed", 0), stage=manifest["stage"],
                        use_diffusion=manifest.get("use_diffusion", True))
    store.load_arrays(arrays, strict=True)
    return store, manifest


# ---------------------------------------------------------------------------
# ablation matrix and iteration sweep
# ---------------------------------------------------------------------------

VARIANTS = {
    "V1": {"use_diffusion": False, "use_kl": False, "insert_noise": False},
    "V2": {"use_diffusion": True, "use_kl": False, "insert_noise": False},
    "V3": {"use_diffusion": True, "use_kl": True, "insert_noise": True},
    "V4": {"use_diffusion": True, "use_kl": True, "insert_noise": False},
}


def _variant_config(cfg: RunConfig, flags: dict) -> RunConfig:
    train = dataclasses.replace(cfg.train, use_diffusion=flags["use_diffusion"],
                                use_kl=flags["use_kl"])
    diffu = dataclasses.replace(cfg.diffusion, insert_noise=flags["insert_noise"])
    return dataclasses.replace(cfg, train=train, diffusion=diffu)


def stage1_for_seeds(cfg: RunConfig, seeds: Sequence[int], train_ds: Dataset,
                     test_ds: Dataset, quiet: bool = True) -> Dict[int, Dict]:
    return {s: train_stage1(cfg, s, train_ds, test_ds, quiet=quiet)[0].arrays()
            for s in seeds}


def _with_epochs(cfg: RunConfig, epochs: Optional[int]) -> RunConfig:
    if epochs is None:
        return cfg
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train,
                                                              epochs=epochs))


def _settled_acc(mets: List[dict], k: int = 5) -> float:
    # single-epoch test accuracy jitters by a couple of points on a 500-image
    # test set; the tail mean is a steadier estimate of converged accuracy
    tail = [m["test_acc"] for m in mets[-k:]]
    return float(np.mean(tail))


def run_ablation(cfg: RunConfig, seeds: Sequence[int], train_ds: Dataset,
                 test_ds: Dataset, stage1: Optional[Dict[int, Dict]] = None,
                 s2_epochs: Optional[int] = None,
                 quiet: bool = True) -> List[dict]:
    """Train every variant on every seed; report per-variant 3-seed medians."""
    if stage1 is None:
        stage1 = stage1_for_seeds(cfg, seeds, train_ds, test_ds, quiet=quiet)
    cfg = _with_epochs(cfg, s2_epochs)
    rows = []
    for name in ("V1", "V2", "V3", "V4"):
        vcfg = _variant_config(cfg, VARIANTS[name])
        accs = []
        for s in seeds:
            _, mets = train_stage2(vcfg, s, train_ds, test_ds, stage1[s],
                                   quiet=quiet)
            accs.append(_settled_acc(mets))
        rows.append({"variant": name, "acc": float(np.median(accs)),
                     "seeds": list(map(int, seeds)),
                     "accs": [float(a) for a in accs]})
    return rows


def sweep_iterations(cfg: RunConfig, seeds: Sequence[int], train_ds: Dataset,
                     test_ds: Dataset, t_values: Sequence[int] = (1, 2, 4, 8, 16, 32),
                     stage1: Optional[Dict[int, Dict]] = None,
                     s2_epochs: Optional[int] = None,
                     quiet: bool = True) -> List[dict]:
    """Accuracy-versus-T curve; per point the schedule is revalidated and,
    when the configured ramp cannot reach terminal noise, beta_end is
    raised to the suggested feasible value."""
    if stage1 is None:
        stage1 = stage1_for_seeds(cfg, seeds, train_ds, test_ds, quiet=quiet)
    cfg = _with_epochs(cfg, s2_epochs)
    points = []
    for T in t_values:
        dcfg, note = _feasible_diffusion(cfg, int(T))
        tcfg = dataclasses.replace(cfg, diffusion=dcfg)
        accs = []
        for s in seeds:
            _, mets = train_stage2(tcfg, s, train_ds, test_ds, stage1[s],
                                   quiet=quiet)
            accs.append(_settled_acc(mets))
        points.append({"T": int(T), "acc": float(np.median(accs)),
                       "accs": [float(a) for a in accs],
                       "beta_end": dcfg.beta_end, "note": note})
    return points


def _feasible_diffusion(cfg: RunConfig, T: int):
    d = dataclasses.replace(cfg.diffusion, timesteps=T)
    try:
        df.make_schedule(T, d.beta_start, d.beta_end)
        return d, ""
    except Exception:
        hint = df._suggest_beta_end(T, d.beta_start)
        if hint is None:
            raise
        d = dataclasses.replace(d, beta_end=float(hint))
        df.make_schedule(T, d.beta_start, d.beta_end)
        return d, f"beta_end raised to {hint:.6f} to satisfy terminal noise"


# ---------------------------------------------------------------------------
# feature export
# ---------------------------------------------------------------------------


def export_features(store: ParamStore, cfg: RunConfig, ds: Dataset, seed: int,
                    mode: str = "stage2") -> Dict[str, np.ndarray]:
    """Penultimate features per sample plus a centered top-2 principal-axis
    projection (sign-fixed for determinism)."""
    schedule = None
    if mode == "stage2":
        schedule = df.make_schedule(cfg.diffusion.timesteps,
                                    cfg.diffusion.beta_start,
                                    cfg.diffusion.beta_end)
    res = evaluate(store, cfg, ds, mode, seed, schedule, want_features=True)
    feats = res.features
    centered = feats - feats.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    for i in range(axes.shape[0]):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    proj = centered @ axes.T
    return {"features": feats, "labels": ds.labels.astype(np.int64),
            "projection": proj, "predictions": res.predictions}


def centroid_separation(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean inter-centroid distance over mean intra-class spread."""
    classes = np.unique(labels)
    cents = np.stack([features[labels == c].mean(axis=0) for c in classes])
    inter = [np.linalg.norm(cents[i] - cents[j])
             for i in range(len(classes)) for j in range(i + 1, len(classes))]
    intra = [np.linalg.norm(features[labels == c] - cents[k], axis=1).mean()
             for k, c in enumerate(classes)]
    return float(np.mean(inter) / max(np.mean(intra), 1e-12))
