"""Command-line entry point.

Subcommands: gen-data, degrade, train-stage1, train-stage2, infer,
ablate, sweep-t, export-features, grad-check.  Global flags --config
(JSON), --seed (u64) and --out (directory).  Every subcommand echoes its
fully resolved configuration to <out>/run.json before doing any work.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite values).
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional

import numpy as np

from . import checks, fileio, harness
from .config import RunConfig
from .data import ToySpec, generate, load_dataset, save_dataset
from .degrade import DegradeParams, degrade_dataset
from .errors import ConfigError, DataError, NumericError, UdcferError

# decorrelates the degradation noise stream from the glyph jitter stream
_DEGRADE_SEED_OFFSET = 0x9E3779B9


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="udcfer", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="<command>")

    def common(sp, data=False, ckpt=False, stage1=False):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=0, help="u64 run seed")
        sp.add_argument("--out", default=".", help="output directory")
        if data:
            sp.add_argument("--data", required=True,
                            help="dataset directory (or root with train/ test/)")
        if ckpt:
            sp.add_argument("--checkpoint", required=True,
                            help="checkpoint directory")
        if stage1:
            sp.add_argument("--stage1", required=True,
                            help="stage-1 checkpoint directory")

    common(sub.add_parser("gen-data", help="generate the paired toy dataset"))
    common(sub.add_parser("degrade", help="re-degrade a dataset's clean images"),
           data=True)
    common(sub.add_parser("train-stage1", help="supervised pretraining"),
           data=True)
    common(sub.add_parser("train-stage2", help="diffusion-prior training"),
           data=True, stage1=True)
    common(sub.add_parser("infer", help="predict labels for a dataset split"),
           data=True, ckpt=True)
    common(sub.add_parser("ablate", help="train and score variants V1..V4"),
           data=True)
    sw = sub.add_parser("sweep-t", help="accuracy versus diffusion steps")
    common(sw, data=True)
    sw.add_argument("--t-values", default="1,2,4,8,16,32",
                    help="comma-separated iteration counts")
    common(sub.add_parser("export-features",
                          help="penultimate features + 2-D projection"),
           data=True, ckpt=True)
    common(sub.add_parser("grad-check", help="per-block gradient validation"))
    return p


def _seeds(seed: int) -> List[int]:
    return [seed, seed + 1, seed + 2]


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg.validate()
    return cfg


def _echo_run(args, cfg: RunConfig, extra: Optional[dict] = None) -> None:
    os.makedirs(args.out, exist_ok=True)
    rec = {"command": args.command, "seed": int(args.seed), "out": args.out,
           "config": cfg.to_dict()}
    for k in ("data", "checkpoint", "stage1"):
        if hasattr(args, k.replace("-", "_")) and getattr(args, k, None):
            rec[k] = getattr(args, k)
    if extra:
        rec.update(extra)
    fileio.write_json(os.path.join(args.out, "run.json"), rec)


def _load_splits(root: str):
    train_dir = os.path.join(root, "train")
    test_dir = os.path.join(root, "test")
    if not (os.path.isdir(train_dir) and os.path.isdir(test_dir)):
        raise DataError(f"{root}: expected train/ and test/ subdirectories")
    return load_dataset(train_dir), load_dataset(test_dir)


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def _cmd_gen_data(args, cfg: RunConfig) -> int:
    _echo_run(args, cfg)
    spec = ToySpec(num_classes=cfg.data.num_classes,
                   image_size=cfg.data.image_size,
                   train_count=cfg.data.train_size,
                   test_count=cfg.data.test_size,
                   seed=args.seed, jitter=cfg.data.jitter)
    splits = generate(spec)
    params = DegradeParams(gamma=cfg.degrade.gamma,
                           blur_sigma=cfg.degrade.blur_sigma,
                           noise_sigma=cfg.degrade.noise_sigma,
                           seed=args.seed + _DEGRADE_SEED_OFFSET)
    for name, ds in splits.items():
        paired = degrade_dataset(ds, params)
        save_dataset(paired, os.path.join(args.out, name))
    print(f"wrote {len(splits['train'])} train / {len(splits['test'])} test "
          f"samples under {args.out}")
    return 0


def _cmd_degrade(args, cfg: RunConfig) -> int:
    _echo_run(args, cfg)
    ds = load_dataset(args.data)
    params = DegradeParams(gamma=cfg.degrade.gamma,
                           blur_sigma=cfg.degrade.blur_sigma,
                           noise_sigma=cfg.degrade.noise_sigma,
                           seed=args.seed + _DEGRADE_SEED_OFFSET)
    out_dir = os.path.join(args.out, "degraded")
    save_dataset(degrade_dataset(ds, params), out_dir)
    print(f"wrote degraded dataset to {out_dir}")
    return 0


def _cmd_train_stage1(args, cfg: RunConfig) -> int:
    _echo_run(args, cfg)
    train_ds, test_ds = _load_splits(args.data)
    _, metrics = harness.train_stage1(cfg, args.seed, train_ds, test_ds,
                                      out_dir=args.out, quiet=False)
    print(f"final test accuracy {metrics[-1]['test_acc']:.4f}")
    return 0


def _cmd_train_stage2(args, cfg: RunConfig) -> int:
    _echo_run(args, cfg)
    train_ds, test_ds = _load_splits(args.data)
    arrays, manifest = fileio.load_checkpoint(args.stage1)
    if manifest.get("stage") != 1:
        raise DataError(f"{args.stage1}: not a stage-1 checkpoint")
    if manifest.get("epr_dim") != cfg.model.epr_dim:
        raise DataError("stage-1 checkpoint prior width differs from config")
    _, metrics = harness.train_stage2(cfg, args.seed, train_ds, test_ds,
                                      arrays, out_dir=args.out, quiet=False)
    print(f"final test accuracy {metrics[-1]['test_acc']:.4f}")
    return 0


def _cmd_infer(args, cfg: RunConfig) -> int:
    _echo_run(args, cfg)
    ds = load_dataset(args.data)
    store, manifest = harness.load_run_checkpoint(cfg, args.checkpoint)
    if manifest["stage"] == 1:
        mode = "stage1"
    else:
        mode = "stage2" if manifest.get("use_diffusion", True) else "prior"
    schedule = None
    if mode == "stage2":
        import dataclasses

        from .diffusion import make_schedule
        dcfg = dataclasses.replace(cfg.diffusion,
                                   timesteps=int(manifest["timesteps"]),
                                   insert_noise=bool(manifest.get("insert_noise", True)),
                                   ddpm_coeff=bool(manifest.get("ddpm_coeff", False)))
        cfg = dataclasses.replace(cfg, diffusion=dcfg)
        schedule = make_schedule(dcfg.timesteps, dcfg.beta_start, dcfg.beta_end)
    res = harness.evaluate(store, cfg, ds, mode, manifest.get("seed", args.seed),
                           schedule)
    path = os.path.join(args.out, "predictions.csv")
    fileio.write_predictions_csv(path, np.arange(len(ds)), res.predictions,
                                 ds.labels)
    print(f"accuracy {res.accuracy:.4f}; wrote {path}")
    return 0


def _cmd_ablate(args, cfg: RunConfig) -> int:
    _echo_run(args, cfg, {"seeds": _seeds(args.seed)})
    train_ds, test_ds = _load_splits(args.data)
    rows = harness.run_ablation(cfg, _seeds(args.seed), train_ds, test_ds,
                                quiet=False)
    fileio.write_json(os.path.join(args.out, "ablation.json"), rows)
    lines = ["variant,acc," + ",".join(f"seed{i}" for i in range(len(rows[0]["accs"])))]
    for r in rows:
        lines.append(f"{r['variant']},{r['acc']:.6f},"
                     + ",".join(f"{a:.6f}" for a in r["accs"]))
        print(f"{r['variant']}: median acc {r['acc']:.4f}")
    fileio.atomic_write_text(os.path.join(args.out, "ablation.csv"),
                             "\n".join(lines) + "\n")
    return 0


def _cmd_sweep_t(args, cfg: RunConfig) -> int:
    try:
        t_values = [int(t) for t in args.t_values.split(",") if t.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --t-values: {e}") from e
    if not t_values or any(t < 1 for t in t_values):
        raise ConfigError("--t-values must be positive integers")
    _echo_run(args, cfg, {"seeds": _seeds(args.seed), "t_values": t_values})
    train_ds, test_ds = _load_splits(args.data)
    points = harness.sweep_iterations(cfg, _seeds(args.seed), train_ds, test_ds,
                                      t_values, quiet=False)
    fileio.write_json(os.path.join(args.out, "sweep.json"), points)
    lines = ["T,acc,beta_end"]
    for pt in points:
        lines.append(f"{pt['T']},{pt['acc']:.6f},{pt['beta_end']:.6f}")
        print(f"T={pt['T']}: median acc {pt['acc']:.4f}")
    fileio.atomic_write_text(os.path.join(args.out, "sweep.csv"),
                             "\n".join(lines) + "\n")
    return 0


def _cmd_export_features(args, cfg: RunConfig) -> int:
    _echo_run(args, cfg)
    ds = load_dataset(args.data)
    store, manifest = harness.load_run_checkpoint(cfg, args.checkpoint)
    if manifest["stage"] == 1:
        mode = "stage1"
    else:
        mode = "stage2" if manifest.get("use_diffusion", True) else "prior"
    out = harness.export_features(store, cfg, ds, manifest.get("seed", args.seed),
                                  mode=mode)
    for name in ("features", "projection"):
        fileio.write_tnsr(os.path.join(args.out, f"{name}.tnsr"), out[name], "f64")
    fileio.write_tnsr(os.path.join(args.out, "labels.tnsr"),
                      out["labels"].astype(np.float64), "f64")
    lines = ["index,x,y,label"]
    for i, (p, y) in enumerate(zip(out["projection"], out["labels"])):
        lines.append(f"{i},{p[0]:.6f},{p[1]:.6f},{int(y)}")
    fileio.atomic_write_text(os.path.join(args.out, "projection.csv"),
                             "\n".join(lines) + "\n")
    print(f"wrote features for {len(ds)} samples to {args.out}")
    return 0


def _cmd_grad_check(args, cfg: RunConfig) -> int:
    _echo_run(args, cfg)
    report = checks.run_gradcheck(args.seed)
    fileio.write_json(os.path.join(args.out, "gradcheck.json"), report)
    worst = 0.0
    for row in report:
        print(f"{row['block']:<14s} max_rel_err {row['max_rel_err']:.3e} "
              f"({row['params']} params)")
        worst = max(worst, row["max_rel_err"])
    if worst >= 1e-4:
        raise NumericError(f"gradient check failed: worst error {worst:.3e}")
    print(f"all blocks < 1e-4 (worst {worst:.3e})")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "degrade": _cmd_degrade,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "infer": _cmd_infer,
    "ablate": _cmd_ablate,
    "sweep-t": _cmd_sweep_t,
    "export-features": _cmd_export_features,
    "grad-check": _cmd_grad_check,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        if not (0 <= args.seed < 2 ** 64):
            raise ConfigError("--seed must fit in u64")
        cfg = _load_config(args)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except UdcferError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
