"""``handfold`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or file-format error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics
from .dataset import ManifestError, load_frames, load_manifest, write_synthetic
from .folding import LOCAL_LEVELS, ModelConfig, count_flops, count_params
from .losses import success_rate_curve, write_curve_csv
from .preprocess import (CameraIntrinsics, DepthFormatError, DegenerateFrameError, EmptyFrameError,
                         foreground_mask, preprocess_depth, read_depth)
from .synth import SYNTH_INTRINSICS
from .training import (CheckpointFormatError, DivergenceError, TrainConfig, evaluate_mm, load_checkpoint,
                       predict, train)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config file: flat "key = value" lines; CLI flag > config file > default

_TRAIN_KEYS = {
    "epochs": int, "k": int, "seed": int, "batch": int, "lr": float, "lr_decay": float,
    "lr_decay_epoch": int, "augment": "bool", "loss_variant": str, "local_feature": "bool",
    "spatial_dependency": "bool", "local_level": str, "workers": int, "checkpoint_every": int,
    "synthetic": int, "n_points": int, "data_seed": int,
}
_DEFAULTS = {
    "epochs": 400, "k": 2, "seed": 0, "batch": 32, "lr": 1e-3, "lr_decay": 0.1, "lr_decay_epoch": None,
    "augment": True, "loss_variant": "kinked", "local_feature": True, "spatial_dependency": True,
    "local_level": "1", "workers": 1, "checkpoint_every": 10, "synthetic": None, "n_points": 1024,
    "data_seed": 0,
}


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def read_config(path: str | Path) -> dict:
    out = {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TRAIN_KEYS:
            raise UsageError(f"{p}:{lineno}: unknown key {key!r}")
        kind = _TRAIN_KEYS[key]
        try:
            out[key] = _parse_bool(val) if kind == "bool" else kind(val)
        except ValueError as e:
            raise UsageError(f"{p}:{lineno}: {e}") from None
    return out


def resolve_train_settings(args: argparse.Namespace) -> dict:
    settings = dict(_DEFAULTS)
    if args.config:
        settings.update(read_config(args.config))
    for key in _TRAIN_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    if settings["local_level"] not in LOCAL_LEVELS:
        raise UsageError(f"--local-level must be one of input, 1, 2 (got {settings['local_level']!r})")
    return settings


def model_config_from(settings: dict, num_joints: int) -> ModelConfig:
    return ModelConfig(num_joints=num_joints, num_local_folds=settings["k"], n_points=settings["n_points"],
                       local_level=LOCAL_LEVELS[settings["local_level"]],
                       use_local_feature=settings["local_feature"],
                       use_spatial_dependency=settings["spatial_dependency"])


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    s = resolve_train_settings(args)
    if args.manifest is None and s["synthetic"] is None:
        raise UsageError("train needs a manifest or --synthetic N")
    out = Path(args.out)
    if args.manifest is not None:
        manifest_path = Path(args.manifest)
    else:
        manifest_path = write_synthetic(out / "data", s["synthetic"], seed=s["seed"])
    manifest = load_manifest(manifest_path)
    frames = load_frames(manifest, n_points=s["n_points"], seed=s["data_seed"])
    if not frames:
        raise UsageError(f"{manifest_path}: no samples")
    tc = TrainConfig(lr=s["lr"], batch=s["batch"], epochs=s["epochs"], lr_decay=s["lr_decay"],
                     lr_decay_epoch=s["lr_decay_epoch"], seed=s["seed"], augment=s["augment"],
                     loss_variant=s["loss_variant"], checkpoint_every=s["checkpoint_every"],
                     workers=1 if args.deterministic else s["workers"])
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"
    with open(log_path, "w") as logf:
        def on_epoch(entry):
            line = entry.to_line()
            logf.write(line + "\n")
            logf.flush()
            print(line, flush=True)
        train(frames, model_config_from(s, manifest.num_joints), tc, out_dir=out, resume=args.resume,
              on_epoch=on_epoch)
    print(f"checkpoint {out / 'last.hfld'}")
    return EXIT_OK


def parse_thresholds(spec: str) -> list[float]:
    """``a:b:step`` (inclusive) or a comma-separated list, in mm."""
    try:
        if ":" in spec:
            a, b, step = (float(x) for x in spec.split(":"))
            if step <= 0:
                raise ValueError("step must be positive")
            n = int(np.floor((b - a) / step + 1e-9)) + 1
            return [a + i * step for i in range(n)]
        vals = [float(x) for x in spec.split(",") if x.strip()]
    except ValueError as e:
        raise UsageError(f"bad thresholds {spec!r}: {e}") from None
    if not vals:
        raise UsageError("threshold list is empty")
    return vals


def cmd_eval(args) -> int:
    model, _, header = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    frames = load_frames(manifest, n_points=model.cfg.n_points, seed=args.data_seed)
    errs = evaluate_mm(model, frames, seed=args.seed)
    pred = predict(model, frames, seed=args.seed)
    per_joint = np.mean([np.linalg.norm(f.transform.denormalize(p) - f.transform.denormalize(f.gt_joints), axis=1)
                         for p, f in zip(pred, frames)], axis=0)
    thresholds = parse_thresholds(args.thresholds)
    rates = success_rate_curve(errs, thresholds)
    print(f"frames {len(frames)}")
    print(f"mean_error_mm {errs.mean():.4f}")
    for name, e in zip(model.skeleton.joint_names, per_joint):
        print(f"joint {name} {e:.4f}")
    if args.csv:
        write_curve_csv(args.csv, thresholds, rates)
        print(f"curve {args.csv}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    intr = CameraIntrinsics(*args.intrinsics) if args.intrinsics else SYNTH_INTRINSICS
    depth = read_depth(args.depth)
    mask = foreground_mask(depth, args.min_depth, args.max_depth, args.center_depth, args.half_window)
    frame = preprocess_depth(depth, intr, mask, model.cfg.n_points, 30, args.seed)
    joints = frame.transform.denormalize(predict(model, [frame], seed=args.seed)[0])
    for name, (x, y, z) in zip(model.skeleton.joint_names, joints):
        print(f"{name} {x:.3f} {y:.3f} {z:.3f}")
    return EXIT_OK


def cmd_params(args) -> int:
    ks = [args.k] if args.k is not None else [0, 1, 2, 3]
    print("K params flops_mac2_G flops_mac_G")
    for k in ks:
        cfg = ModelConfig(num_local_folds=k)
        print(f"{k} {count_params(cfg)} {count_flops(cfg, 'mac2') / 1e9:.4f} {count_flops(cfg, 'mac') / 1e9:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = diagnostics.run_suite(args.seed, perturb=args.perturb, pipeline=not args.ops_only)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print("ALL PASS" if not failed else f"FAILED: {' '.join(failed)}")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_synth(args) -> int:
    path = write_synthetic(args.out, args.count, seed=args.seed, layout=args.layout)
    print(f"manifest {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _bool_flag(p, name: str, dest: str, help_on: str):
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help_on)
    g.add_argument(f"--no-{name}", dest=dest, action="store_false", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="handfold", description="Skeleton-folding hand pose estimation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("manifest", nargs="?", help="dataset manifest (omit with --synthetic)")
    t.add_argument("--synthetic", type=int, help="train on N rendered synthetic hands")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--out", default="run", help="output directory (checkpoint, log)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--k", type=int, help="number of local folding blocks")
    t.add_argument("--seed", type=int)
    t.add_argument("--data-seed", type=int, dest="data_seed")
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay", type=float, dest="lr_decay")
    t.add_argument("--lr-decay-epoch", type=int, dest="lr_decay_epoch")
    t.add_argument("--loss-variant", choices=["kinked", "huber"], dest="loss_variant")
    t.add_argument("--n-points", type=int, dest="n_points")
    t.add_argument("--workers", type=int)
    t.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    t.add_argument("--local-level", choices=["input", "1", "2"], dest="local_level")
    t.add_argument("--deterministic", action="store_true", help="single worker (bit-reproducible)")
    _bool_flag(t, "augment", "augment", "random rotation/scale/translation")
    _bool_flag(t, "local-feature", "local_feature", "feed neighbour features to local folds")
    _bool_flag(t, "spatial-dependency", "spatial_dependency", "rearrange embeddings with neighbours")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (read-only)")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--thresholds", default="0:80:2", help="mm, 'a:b:step' or comma list")
    e.add_argument("--csv", help="write the success-rate curve here")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--data-seed", type=int, default=0, dest="data_seed")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="joints (mm) for one depth file")
    i.add_argument("checkpoint")
    i.add_argument("depth")
    i.add_argument("--intrinsics", type=float, nargs=4, metavar=("FX", "FY", "CX", "CY"))
    i.add_argument("--min-depth", type=float, default=1.0)
    i.add_argument("--max-depth", type=float, default=np.inf)
    i.add_argument("--center-depth", type=float)
    i.add_argument("--half-window", type=float, default=150.0)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_infer)

    p = sub.add_parser("params", help="parameter and FLOP counts")
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_params)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and the pipeline")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--perturb", metavar="OP", help="debug hook: corrupt OP's backward (negative control)")
    g.add_argument("--ops-only", action="store_true")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="render synthetic depth frames plus a manifest")
    s.add_argument("count", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--layout", choices=["icvl", "msra", "nyu"], default="icvl")
    s.set_defaults(func=cmd_synth)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors with status 2
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ManifestError, DepthFormatError, CheckpointFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, EmptyFrameError, DegenerateFrameError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
