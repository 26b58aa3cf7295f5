"""Command-line entry point: ``canonpose {gen-data, train, infer, eval}``."""

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, model_fingerprint
from .dataset import ArrayDataset, ShapeSpec, generate_dataset, make_splits, read_manifest
from .errors import CanonPoseError, ConfigError, ShapeError
from .tensorio import load_ndt, save_ndt, save_voxb

log = logging.getLogger("canonpose")

SEED_ENV = "CANON_SEED"


class UsageError(Exception):
    """Bad command-line usage; reported with exit code 2."""


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir, command, argv, config, seed, started, inputs, outputs, fingerprints=None):
    """Atomically write ``run.json``: everything needed to replay the command."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "inputs": [str(p) for p in inputs],
        "outputs": {str(Path(p).relative_to(out_dir)): _sha256(p) for p in sorted(outputs) if Path(p).is_file()},
        "fingerprints": fingerprints or {},
        "environment": {"python": platform.python_version(), "torch": torch.__version__, "numpy": np.__version__},
    }
    tmp = out_dir / "run.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(out_dir / "run.json")
    return manifest


def resolve_seed(flag, config_seed=None):
    """Flag, then config file, then $CANON_SEED, then 0."""
    if flag is not None:
        return flag
    if config_seed is not None:
        return config_seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"${SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def prepare_out(path, force):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"--out {out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _positive(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _resolution(text):
    parts = [int(p) for p in text.lower().replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 16:
        raise argparse.ArgumentTypeError(f"resolution must be N or HxW with sides >= 16, got {text!r}")
    return tuple(parts)


def _started():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def cmd_gen_data(args, argv):
    started = _started()
    seed = resolve_seed(args.seed)
    capacity = args.subjects * args.poses
    if args.samples > capacity:
        raise UsageError(f"--samples {args.samples} exceeds --subjects x --poses = {capacity}")
    out = prepare_out(args.out, args.force)
    spec = ShapeSpec(family=args.family, n_subjects=args.subjects, n_poses=args.poses, seed=seed)
    entries = generate_dataset(out, spec, args.samples, args.resolution, args.voxel_res, workers=args.workers)
    subjects = sorted({e["subject_id"] for e in entries})
    poses = sorted({e["pose_id"] for e in entries})
    print(f"wrote {len(entries)} samples ({len(subjects)} subjects x {len(poses)} poses, family {args.family}, "
          f"{args.resolution[0]}x{args.resolution[1]} depth, {args.voxel_res}^3 voxels) to {out}")
    outputs = [p for p in out.rglob("*") if p.is_file()]
    write_run_manifest(out, "gen-data", argv, {"spec": spec.__dict__, "samples": args.samples,
                                               "resolution": list(args.resolution), "voxel_res": args.voxel_res},
                       seed, started, [], outputs)
    return 0


def _train_config(args, seed):
    from .training import TrainConfig

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {"seed": seed, "stage1_epochs": args.epochs if args.stage == 1 else None,
                 "stage2_epochs": args.epochs if args.stage == 2 else None, "batch_size": args.batch_size,
                 "learning_rate": args.lr, "checkpoint_every": args.checkpoint_every}
    base.update({k: v for k, v in overrides.items() if v is not None})
    abl = dict(base.get("ablations", {}))
    for flag, key in ((args.no_lfe, "lfe"), (args.no_msfe, "msfe"), (args.no_shape_encoder, "shape_encoder")):
        if flag:
            abl[key] = False
    base["ablations"] = abl
    try:
        return TrainConfig.from_dict(base)
    except TypeError as exc:
        raise ConfigError(f"bad config file {args.config}: {exc}") from None


def _fold(data, folds, pose_groups, subject_fold, pose_fold):
    rows = [{"id": i, "subject_id": s, "pose_id": p} for i, s, p in zip(data.ids, data.subject_ids, data.pose_ids)]
    n_subjects = len(set(data.subject_ids))
    if folds > n_subjects:
        raise UsageError(f"--folds {folds} exceeds the {n_subjects} subjects available in the dataset")
    if not 0 <= subject_fold < folds or not 0 <= pose_fold < pose_groups:
        raise UsageError(f"fold ({subject_fold}, {pose_fold}) outside {folds} x {pose_groups}")
    plans = make_splits(rows, folds, pose_groups)
    return plans[subject_fold * pose_groups + pose_fold]


def _load_data(path):
    if not (Path(path) / "manifest.jsonl").exists():
        raise UsageError(f"--data {path} is not a dataset directory (no manifest.jsonl)")
    return ArrayDataset.load(path)


def cmd_train(args, argv):
    from .plotting import plot_history
    from .training import train_stage1, train_stage2

    started = _started()
    if args.stage == 2 and not args.stage1_ckpt:
        raise UsageError("--stage 2 requires --stage1-ckpt")
    config_seed = json.loads(Path(args.config).read_text()).get("seed") if args.config else None
    seed = resolve_seed(args.seed, config_seed)
    cfg = _train_config(args, seed)
    data = _load_data(args.data)
    split = _fold(data, args.folds, args.pose_groups, args.subject_fold, args.pose_fold)
    out = prepare_out(args.out, args.force or args.resume is not None)
    if args.stage == 1:
        run = train_stage1(data, split, cfg, out_dir=out, resume=args.resume)
        ckpt = out / "stage1.ckpt"
        fp = {"stage1": run.checkpoint.fingerprint}
    else:
        run = train_stage2(data, split, args.stage1_ckpt, cfg, out_dir=out, resume=args.resume)
        ckpt = out / "stage2.ckpt"
        fp = {"stage2": run.checkpoint.fingerprint, "stage1": run.checkpoint.stage1_fingerprint}
    plot_history(run.history, out / f"stage{args.stage}_history.png")
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    last = run.history[-1] if run.history else {}
    print(f"stage {args.stage}: {len(run.history)} epochs, checkpoint {ckpt}; last epoch "
          + ", ".join(f"{k}={v:.4g}" for k, v in last.items() if isinstance(v, float)))
    inputs = [args.data] + [p for p in (args.config, args.stage1_ckpt, args.resume) if p]
    write_run_manifest(out, "train", argv, cfg.to_dict(), seed, started, inputs,
                       [p for p in out.rglob("*") if p.is_file() and p.name != "run.json"], fp)
    return 0


def _infer_input(args):
    if args.input.endswith(".ndt"):
        x = load_ndt(args.input)
        if x.ndim == 4 and x.shape[0] == 1:
            x = x[0]
        if x.ndim != 3 or x.shape[0] != 2:
            raise ShapeError(f"{args.input}: expected a (2, H, W) depth/mask pair, got {x.shape}")
        return np.asarray(x, dtype=np.float32), Path(args.input).stem
    if not args.data:
        raise UsageError("--input is neither an .ndt file nor usable as a sample id without --data")
    entries = {e["id"]: e for e in read_manifest(args.data)}
    if args.input not in entries:
        raise UsageError(f"sample {args.input!r} not found in {args.data}")
    from .dataset import load_sample

    return load_sample(args.data, entries[args.input]).posed.stacked(), args.input


def cmd_infer(args, argv):
    from .plotting import plot_depth_pair, plot_voxels, save_grayscale
    from .training import canonicalize, load_stage1_model, load_stage2_model, reconstruct

    started = _started()
    x, name = _infer_input(args)
    stage1 = load_stage1_model(args.stage1_ckpt)
    if tuple(x.shape[-2:]) != tuple(stage1.cfg.input_resolution):
        raise ShapeError(f"input is {x.shape[-2]}x{x.shape[-1]} but the stage-one checkpoint expects "
                         f"{stage1.cfg.input_resolution[0]}x{stage1.cfg.input_resolution[1]}")
    out = prepare_out(args.out, args.force)
    posed = torch.from_numpy(x[None])
    canon = canonicalize(stage1, posed)
    outputs = [out / f"{name}.canonical.ndt"]
    save_ndt(outputs[0], canon[0].numpy())
    stage1_fp = model_fingerprint(stage1, stage1.cfg.fingerprint())
    fps = {"stage1": stage1_fp}
    if not args.no_preview:
        outputs += [save_grayscale(canon[0, 0].numpy(), out / f"{name}.canonical_depth.png"),
                    save_grayscale(canon[0, 1].numpy(), out / f"{name}.canonical_mask.png"),
                    plot_depth_pair(canon[0].numpy(), out / f"{name}.canonical.png", title=f"{name} canonical")]
    msg = f"canonical pair -> {out / (name + '.canonical.ndt')}"
    if args.stage2_ckpt:
        gen = load_stage2_model(args.stage2_ckpt, stage1_fingerprint=stage1_fp)
        vox = reconstruct(gen, posed, canon)[0].numpy()
        outputs += [out / f"{name}.voxels.ndt", out / f"{name}.voxels.voxb"]
        save_ndt(outputs[-2], vox)
        save_voxb(outputs[-1], (vox >= args.threshold).astype(np.float32))
        if not args.no_preview:
            outputs.append(plot_voxels(vox, out / f"{name}.voxels.png", args.threshold, title=f"{name} voxels"))
        fps["stage2"] = load_checkpoint(args.stage2_ckpt).fingerprint
        msg += f"; {vox.shape[0]}^3 voxels ({int((vox >= args.threshold).sum())} occupied) -> {name}.voxels.ndt/.voxb"
    print(msg)
    inputs = [p for p in (args.input, args.data, args.stage1_ckpt, args.stage2_ckpt) if p]
    write_run_manifest(out, "infer", argv, {"threshold": args.threshold}, None, started, inputs,
                       [Path(p) for p in outputs], fps)
    return 0


def cmd_eval(args, argv):
    from .eval import MetricsReport, evaluate_fold
    from .plotting import plot_metrics

    started = _started()
    s1 = args.stage1_ckpt or []
    s2 = args.stage2_ckpt or []
    if not s1:
        raise UsageError("eval needs at least one --stage1-ckpt (or 'oracle' for ground-truth canonical pairs)")
    if args.mode in ("recon", "both") and len(s2) != len(s1):
        raise UsageError(f"--mode {args.mode} needs one --stage2-ckpt per --stage1-ckpt")
    if len(s1) > args.folds:
        raise UsageError(f"{len(s1)} checkpoints given for --folds {args.folds}")
    seed = resolve_seed(args.seed)
    data = _load_data(args.data)
    n_subjects = len(set(data.subject_ids))
    if args.folds > n_subjects:
        raise UsageError(f"--folds {args.folds} exceeds the {n_subjects} subjects available in the dataset")
    out = prepare_out(args.out, args.force)
    folds = []
    outputs = []
    for k, c1 in enumerate(s1):
        split = _fold(data, args.folds, args.pose_groups, k, args.pose_fold)
        c2 = s2[k] if s2 else None
        f = evaluate_fold(c1, c2, split, data, mode=args.mode, n_shuffles=args.shuffles, seed=seed)
        folds.append(f)
        single = MetricsReport.aggregate([f])
        outputs.append(out / f"fold_{f['fold']}.json")
        outputs[-1].write_text(single.to_json() + "\n")
    extras = {k: float(np.mean([f[k] for f in folds])) for k in ("nn_baseline_mean", "nn_baseline_q95")
              if all(k in f for f in folds)}
    report = MetricsReport.aggregate(folds, extras)
    text = report.to_text(title=f"{args.mode} evaluation, {len(folds)} fold(s)")
    for name, content in (("report.json", report.to_json() + "\n"), ("report.txt", text)):
        (out / name).write_text(content)
        outputs.append(out / name)
    if args.csv:
        (out / "report.csv").write_text(report.to_csv())
        outputs.append(out / "report.csv")
    outputs.append(plot_metrics(report, out / "metrics.png"))
    print(text, end="")
    write_run_manifest(out, "eval", argv, {"mode": args.mode, "folds": args.folds, "pose_groups": args.pose_groups,
                                           "pose_fold": args.pose_fold, "shuffles": args.shuffles},
                       seed, started, [args.data, *s1, *s2], outputs)
    return 0


def _add_split_flags(p):
    p.add_argument("--folds", type=_positive, default=3, help="number of subject groups (default 3)")
    p.add_argument("--pose-groups", type=_positive, default=4, help="number of pose groups (default 4)")
    p.add_argument("--pose-fold", type=int, default=0, help="pose group held out for testing")


def build_parser():
    parser = argparse.ArgumentParser(prog="canonpose", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a procedural dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=_positive, default=300)
    g.add_argument("--seed", type=int)
    g.add_argument("--resolution", type=_resolution, default=(64, 64))
    g.add_argument("--voxel-res", type=int, default=32, choices=(8, 16, 32, 64, 128, 256))
    g.add_argument("--family", choices=("biped", "quadruped", "mixed"), default="mixed")
    g.add_argument("--subjects", type=_positive, default=15)
    g.add_argument("--poses", type=_positive, default=20)
    g.add_argument("--workers", type=_positive, default=1)
    g.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train stage one or stage two")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    t.add_argument("--stage1-ckpt", help="frozen stage-one checkpoint (stage 2 only)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=_positive)
    t.add_argument("--batch-size", type=_positive)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=_positive)
    t.add_argument("--no-lfe", action="store_true", help="drop the local feature extractor")
    t.add_argument("--no-msfe", action="store_true", help="drop the multi-scale feature extractor")
    t.add_argument("--no-shape-encoder", action="store_true", help="drop the stage-two shape encoder")
    _add_split_flags(t)
    t.add_argument("--subject-fold", type=int, default=0, help="subject group held out for testing")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="canonicalize one depth pair and optionally recover its voxels")
    i.add_argument("--stage1-ckpt", required=True)
    i.add_argument("--stage2-ckpt")
    i.add_argument("--input", required=True, help="(2, H, W) NDT1 file, or a sample id with --data")
    i.add_argument("--data")
    i.add_argument("--out", required=True)
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--no-preview", action="store_true")
    i.add_argument("--force", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="retrieval and reconstruction scores over folds")
    e.add_argument("--mode", choices=("retrieval", "recon", "both"), default="both")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--stage1-ckpt", action="append", help="one per fold, in subject-fold order; 'oracle' allowed")
    e.add_argument("--stage2-ckpt", action="append")
    _add_split_flags(e)
    e.add_argument("--shuffles", type=_positive, default=1000, help="permutations for the NN chance baseline")
    e.add_argument("--seed", type=int)
    e.add_argument("--csv", action="store_true")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"canonpose {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CanonPoseError, OSError, json.JSONDecodeError) as exc:
        print(f"canonpose {args.command}: error: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
