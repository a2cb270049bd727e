"""Command-line entry point: gen, train, eval, infer, rank, prune.

Exit codes: 0 success, 1 numerical failure, 2 usage/IO error. Every command
writes its resolved configuration next to its outputs. A config file of
`key = value` lines (# comments) provides defaults; command-line flags win.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .diffcore import load_checkpoint, save_checkpoint, CheckpointError
from .fileio import save_pfm, save_ply
from .geometry import backproject
from .model import ModelConfig, init_params, param_count
from .pipeline import prune_and_eval, run_inference
from .synthdata import (Scene, blur_view, compute_metrics, generate_dataset,
                        load_dataset, save_dataset)
from .training import TrainConfig, TrainingError, train

THRESHOLDS = (0.1, 0.5, 1.0, 2.0)


class UsageError(Exception):
    pass


def _workers(n_tasks: int) -> int:
    cap = int(os.environ.get("RAMDEPTH_THREADS", "1"))
    return max(1, min(cap, n_tasks))


def _read_config_file(path) -> dict[str, str]:
    values = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected `key = value`")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def _apply_config_file(args, parser):
    if getattr(args, "config", None):
        values = _read_config_file(args.config)
        sub = getattr(args, "parser", parser)
        defaults = {a.dest for a in sub._actions}
        cli_given = {a for a in sys.argv[1:] if a.startswith("--")}
        for key, val in values.items():
            dest = key.replace("-", "_")
            if dest not in defaults:
                raise UsageError(f"unknown config key {key!r}")
            if f"--{key}" in cli_given:
                continue  # explicit flags win
            current = getattr(args, dest)
            caster = type(current) if current is not None else str
            if caster is bool:
                setattr(args, dest, val.lower() in ("1", "true", "yes"))
            else:
                setattr(args, dest, caster(val))
    return args


def _write_resolved_config(out_dir: Path, args) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    skip = {"func", "config", "parser"}
    with open(out_dir / "run_config.txt", "w") as f:
        for key in sorted(vars(args)):
            if key in skip:
                continue
            f.write(f"{key} = {getattr(args, key)}\n")


def _parse_size(size: str) -> tuple[int, int]:
    try:
        w, h = size.lower().split("x")
        w, h = int(w), int(h)
    except ValueError:
        raise UsageError(f"invalid --size {size!r}, expected WxH")
    if w % 8 or h % 8:
        raise UsageError(f"--size {size}: dims must be divisible by 8")
    return w, h


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        base_channels=args.base_channels,
        feature_dim=args.feature_dim,
        context_dim=args.context_dim,
        hidden_dim=args.hidden_dim,
    )


def _add_model_flags(p):
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--context-dim", type=int, default=64)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--cycles", type=int, default=10)


def _load_params(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _load_scenes(path) -> list[Scene]:
    if not Path(path, "scenes.txt").exists():
        raise UsageError(f"no dataset at {path}")
    return load_dataset(path)


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty (use --force)")
    w, h = _parse_size(args.size)
    if args.views < 2:
        raise UsageError("--views must be at least 2 (reference + sources)")

    def make(i):
        from .synthdata import SceneSpec, generate_scene
        return generate_scene(SceneSpec(seed=args.seed + 1000 * i, width=w, height=h,
                                        n_views=args.views), f"scene_{i:04d}")

    with ThreadPoolExecutor(max_workers=_workers(args.scenes)) as ex:
        scenes = list(ex.map(make, range(args.scenes)))
    save_dataset(out, scenes)
    _write_resolved_config(out, args)
    print(f"wrote {len(scenes)} scenes to {out}")


def cmd_train(args):
    scenes = _load_scenes(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _model_config(args)
    params = init_params(cfg, seed=args.seed)
    n_val = min(args.val_scenes, max(0, len(scenes) - 1))
    val = scenes[len(scenes) - n_val:] if n_val else []
    trainset = scenes[:len(scenes) - n_val] if n_val else scenes
    tc = TrainConfig(gamma=args.gamma, lr=args.lr, weight_decay=args.weight_decay,
                     clip_norm=args.clip_norm, cycles=args.cycles, steps=args.steps,
                     seed=args.seed, fine_tune_lr=args.fine_tune_lr,
                     fine_tune_start=args.fine_tune_start,
                     checkpoint_every=args.checkpoint_every)
    _write_resolved_config(out, args)
    if args.steps == 0:
        save_checkpoint(out / "final.ckpt", params)
        (out / "loss.csv").write_text("step,loss,mae_val\n")
        print(f"wrote initial checkpoint ({param_count(params)} parameters)")
        return
    train(tc, trainset, params, cfg, out_dir=out, val_scenes=val)
    print(f"trained {args.steps} steps; checkpoint at {out / 'final.ckpt'}")


def cmd_eval(args):
    scenes = _load_scenes(args.data)
    params = _load_params(args.ckpt)
    cfg = _model_config(args)

    def one(scene):
        res = run_inference(scene.views[0], scene.views[1:], params, cfg, args.cycles)
        gt = scene.gt_depths[0]
        return compute_metrics(res.final_depth.data.reshape(gt.shape), gt, gt > 0, THRESHOLDS)

    with ThreadPoolExecutor(max_workers=_workers(len(scenes))) as ex:
        metrics = list(ex.map(one, scenes))
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    with open(report, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scene", "mae", "rmse"] + [f">{t}" for t in THRESHOLDS])
        for scene, m in zip(scenes, metrics):
            writer.writerow([scene.id, f"{m.mae:.6g}", f"{m.rmse:.6g}"]
                            + [f"{m.threshold_fractions[t]:.6g}" for t in THRESHOLDS])
    _write_resolved_config(report.parent, args)
    print(f"evaluated {len(scenes)} scenes -> {report}")


def cmd_infer(args):
    scenes = _load_scenes_from_scene_dir(args.scene)
    params = _load_params(args.ckpt)
    cfg = _model_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = scenes[0]
    res = run_inference(scene.views[0], scene.views[1:], params, cfg, args.cycles)
    if args.dump_sequence:
        for s, d in enumerate(res.depth_sequence, 1):
            save_pfm(out / f"depth_step_{s:03d}.pfm", d.data)
    save_pfm(out / "depth_final.pfm", res.final_depth.data)
    points, colors = backproject(res.final_depth, scene.views[0])
    save_ply(out / "points.ply", points, colors)
    _write_resolved_config(out, args)
    print(f"wrote depth and point cloud to {out}")


def _load_scenes_from_scene_dir(path) -> list[Scene]:
    # a single scene directory (view_k.ppm + cameras.txt), no manifest needed
    from .fileio import load_ppm, load_pfm
    from .geometry import load_cameras, View
    from .diffcore import Tensor
    d = Path(path)
    if not (d / "cameras.txt").exists():
        raise UsageError(f"no cameras.txt in {d}")
    cams = load_cameras(d / "cameras.txt")
    views, depths = [], []
    for k in range(len(cams)):
        vid = f"view_{k}"
        intr, pose = cams[vid]
        views.append(View(Tensor(load_ppm(d / f"{vid}.ppm")), intr, pose, vid))
        pfm = d / f"depth_{k}.pfm"
        depths.append(load_pfm(pfm) if pfm.exists() else None)
    return [Scene(d.name, views, depths)]


def cmd_rank(args):
    scenes = _load_scenes(args.data)
    params = _load_params(args.ckpt)
    cfg = _model_config(args)
    report = Path(args.report) if args.report else Path(args.data) / "ranking.csv"
    rows = []
    for scene in scenes:
        sources = scene.views[1:]
        if args.blur_top > 0:
            base = run_inference(scene.views[0], sources, params, cfg, args.cycles)
            top = base.ranking.ordering[:args.blur_top]
            extra = [blur_view(s, args.sigma) for s in sources if s.id in top]
            for i, b in enumerate(extra):
                b.id = b.id + "_blur"
            sources = sources + extra
        res = run_inference(scene.views[0], sources, params, cfg, args.cycles)
        for sid in res.ranking.ordering:
            rows.append([scene.id, sid, f"{res.ranking.scores[sid]:.6g}"])
    report.parent.mkdir(parents=True, exist_ok=True)
    with open(report, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scene", "source", "score"])
        writer.writerows(rows)
    _write_resolved_config(report.parent, args)
    print(f"ranking report -> {report}")


def cmd_prune(args):
    scenes = _load_scenes(args.data)
    params = _load_params(args.ckpt)
    cfg = _model_config(args)
    report = Path(args.report) if args.report else Path(args.data) / "prune.csv"
    rows = []
    for scene in scenes:
        m, kept = prune_and_eval(scene.views[0], scene.views[1:], params, cfg,
                                 args.k, args.mode, args.seed, scene.gt_depths[0],
                                 cycles=args.cycles, thresholds=THRESHOLDS)
        rows.append([scene.id, args.mode, args.k, " ".join(kept),
                     f"{m.mae:.6g}", f"{m.rmse:.6g}"])
    report.parent.mkdir(parents=True, exist_ok=True)
    with open(report, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scene", "mode", "k", "kept", "mae", "rmse"])
        writer.writerows(rows)
    _write_resolved_config(report.parent, args)
    print(f"prune report -> {report}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ramdepth")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="96x64")
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--force", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_gen, parser=p)

    p = sub.add_parser("train", help="train the toy model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=800)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=0.8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--fine-tune-lr", type=float, default=1e-5)
    p.add_argument("--fine-tune-start", type=int, default=-1)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--val-scenes", type=int, default=2)
    p.add_argument("--config")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train, parser=p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--config")
    _add_model_flags(p)
    p.set_defaults(func=cmd_eval, parser=p)

    p = sub.add_parser("infer", help="run inference on one scene directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-sequence", action="store_true")
    p.add_argument("--config")
    _add_model_flags(p)
    p.set_defaults(func=cmd_infer, parser=p)

    p = sub.add_parser("rank", help="rank source views per scene")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report")
    p.add_argument("--blur-top", type=int, default=0)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--config")
    _add_model_flags(p)
    p.set_defaults(func=cmd_rank, parser=p)

    p = sub.add_parser("prune", help="evaluate with a pruned source set")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=["ranked", "random"], required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--config")
    _add_model_flags(p)
    p.set_defaults(func=cmd_prune, parser=p)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(args, parser)
        args.func(args)
        return 0
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
