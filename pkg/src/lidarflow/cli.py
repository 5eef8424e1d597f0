"""Command-line entry point: ``lidarflow <command> [options]``.

Commands: project, train, finetune, infer, eval, render, gradcheck, selftest.
Every command accepts ``--config FILE`` (flat key=value); explicit flags win
over the file. Failures exit non-zero with a one-line JSON message on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import flowio, gradcheck, kitti, losses, training
from .errors import ConfigError, DataError, LidarFlowError
from .evaluation import eval_l1, infer
from .model import DEFAULT_CONFIG, init_params, param_count
from .projection import ProjectionConfig, RangeImage, project_cloud, read_rimg, write_rimg

log = logging.getLogger("lidarflow")

PROJECTION_KEYS = {"width": int, "height": int, "fov_up": float, "fov_down": float, "max_range": float}
LOSS_KEYS = {"gamma": float, "norm": str, "mask_mode": str}
PATH_KEYS = {"data_root", "checkpoint", "out", "split", "cache_dir", "max_triplets"}
ALLOWED_KEYS = frozenset(training.TRAIN_KEYS | set(PROJECTION_KEYS) | set(LOSS_KEYS) | PATH_KEYS)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--data-root", help="KITTI odometry root (holds sequences/)")
    p.add_argument("--checkpoint", help="checkpoint file (.lfck)")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--fov-up", type=float)
    p.add_argument("--fov-down", type=float)
    p.add_argument("--max-range", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", help="train/val/test sequence ids, e.g. 00-15/16-18/19-21")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidarflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="project Velodyne .bin scans to RIMG range images")
    _common(p)
    p.add_argument("inputs", nargs="+", help=".bin files")
    p.add_argument("--render", action="store_true", help="also write a .pgm preview")

    for name in ("train", "finetune"):
        p = sub.add_parser(name, help=f"{name} phase")
        _common(p)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--initial-lr", type=float)
        p.add_argument("--max-triplets", type=int, help="cap the training triplets (desk-scale runs)")
        p.add_argument("--synthetic", type=int, metavar="N",
                       help="train on N synthetic +1 px shift pairs instead of KITTI")

    p = sub.add_parser("infer", help="estimate flow between two frames and write a .flo file")
    _common(p)
    p.add_argument("frame1")
    p.add_argument("frame2")
    p.add_argument("--render", help="write a colour-coded .ppm of the flow here")

    p = sub.add_parser("eval", help="L1 reconstruction metric on the test split")
    _common(p)
    p.add_argument("--max-triplets", type=int)

    p = sub.add_parser("render", help="render a .rimg or .flo file to a portable pixmap")
    _common(p)
    p.add_argument("input")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _common(p)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--model", action="store_true", help="also check the end-to-end loss gradient")

    p = sub.add_parser("selftest", help="fast consistency checks")
    _common(p)
    return parser


def resolve_settings(args) -> dict:
    """Config file values overlaid with explicit flags (flags win)."""
    values = {}
    if args.config:
        values.update(training.read_config_file(args.config, ALLOWED_KEYS))
    for key, val in vars(args).items():
        if val is None or key in ("config", "command", "verbose", "inputs", "input", "frame1", "frame2",
                                  "render", "instances", "model", "synthetic"):
            continue
        values[key] = str(val)
    return values


def projection_from(values: dict) -> ProjectionConfig:
    kwargs = {}
    for key, typ in PROJECTION_KEYS.items():
        if key in values:
            try:
                kwargs[key] = typ(values[key])
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {values[key]!r}") from None
    try:
        return ProjectionConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def weights_from(values: dict) -> losses.LossWeights:
    kwargs = {k: typ(values[k]) for k, typ in LOSS_KEYS.items() if k in values}
    try:
        return losses.LossWeights(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _require(values: dict, key: str) -> str:
    if key not in values:
        raise ConfigError(f"missing required setting --{key.replace('_', '-')}")
    return values[key]


def _load_frame(path: str, proj: ProjectionConfig) -> RangeImage:
    if path.endswith(".rimg"):
        return read_rimg(path)
    return project_cloud(kitti.load_velodyne_bin(path), proj)


def _datasets(values: dict, proj: ProjectionConfig):
    root = _require(values, "data_root")
    split = kitti.DatasetSplit.parse(values["split"]) if "split" in values else kitti.DatasetSplit()
    train_t, val_t, test_t = kitti.discover(root, split)
    cap = int(values["max_triplets"]) if "max_triplets" in values else None
    if cap is not None:
        train_t, val_t, test_t = train_t[:cap], val_t[:cap], test_t[:cap]
    cache = kitti.FrameCache(proj, values.get("cache_dir"))
    return (kitti.PairDataset(train_t, cache), kitti.PairDataset(val_t, cache), kitti.PairDataset(test_t, cache))


def cmd_project(args, values) -> int:
    proj = projection_from(values)
    out = Path(values.get("out", "."))
    multiple = len(args.inputs) > 1 or out.is_dir()
    for src in args.inputs:
        img = project_cloud(kitti.load_velodyne_bin(src), proj)
        dest = out / (Path(src).stem + ".rimg") if multiple else out
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_rimg(dest, img)
        if args.render:
            flowio.render_range(dest.with_suffix(".pgm"), img.ranges, proj.max_range)
        print(json.dumps({"input": src, "output": str(dest), "occupied_fraction": img.occupied_fraction()}))
    return 0


def _train_like(args, values, phase: str) -> int:
    proj = projection_from(values)
    weights = weights_from(values)
    cfg = training.TrainConfig.from_mapping(values, phase=phase)
    if args.synthetic:
        from .synthetic import shift_dataset

        train_set = shift_dataset(args.synthetic, seed=cfg.seed)
        val_set = shift_dataset(max(1, args.synthetic // 4), seed=cfg.seed + 1)
    else:
        train_set, val_set, _ = _datasets(values, proj)
    if len(train_set) == 0:
        raise DataError("no training triplets found")
    out_dir = Path(values.get("out", "runs"))
    if phase == "train":
        ckpt = training.train(train_set, cfg, val_dataset=val_set, weights=weights, out_dir=out_dir)
    else:
        start = training.Checkpoint.load(_require(values, "checkpoint"))
        ckpt = training.finetune(train_set, cfg, start, val_dataset=val_set, weights=weights, out_dir=out_dir)
    print(json.dumps({
        "phase": phase,
        "epochs": ckpt.epoch,
        "steps": ckpt.step_count,
        "train_history": ckpt.train_history,
        "val_history": ckpt.val_history,
        "best_validation_loss": ckpt.best_validation_loss,
        "checkpoint": str(out_dir / "last.lfck"),
    }))
    return 0


def cmd_infer(args, values) -> int:
    proj = projection_from(values)
    ckpt = training.Checkpoint.load(_require(values, "checkpoint"))
    f1 = _load_frame(args.frame1, proj)
    f2 = _load_frame(args.frame2, proj)
    flow = infer(ckpt.params, f1, f2, proj)
    out = values.get("out", "flow.flo")
    flowio.write_flo(out, flow)
    if args.render:
        flowio.render_flow(args.render, flow)
    mag = np.hypot(flow[0, 0], flow[0, 1])
    print(json.dumps({"output": out, "mean_magnitude_px": float(mag[f1.occupancy].mean()) if f1.occupancy.any() else 0.0}))
    return 0


def cmd_eval(args, values) -> int:
    proj = projection_from(values)
    ckpt = training.Checkpoint.load(_require(values, "checkpoint"))
    _, _, test_set = _datasets(values, proj)
    pairs = [test_set.raw_pair(i) for i in range(len(test_set))]
    report = eval_l1(ckpt.params, pairs, proj)
    text = json.dumps(report.to_dict(), indent=2)
    if "out" in values:
        Path(values["out"]).write_text(text + "\n")
    print(text)
    return 0


def cmd_render(args, values) -> int:
    proj = projection_from(values)
    src = args.input
    if src.endswith(".flo"):
        out = values.get("out", str(Path(src).with_suffix(".ppm")))
        flowio.render_flow(out, flowio.read_flo(src))
    else:
        out = values.get("out", str(Path(src).with_suffix(".pgm")))
        flowio.render_range(out, read_rimg(src).ranges, proj.max_range)
    print(json.dumps({"output": out}))
    return 0


def cmd_gradcheck(args, values) -> int:
    seed = int(values.get("seed", 0))
    ok = True
    for res in gradcheck.op_suite(args.instances, seed):
        passed = res.worst < 1e-5
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {res.name:<18} worst relative error {res.worst:.2e}")
    if args.model:
        from .selfcheck import end_to_end_gradcheck

        res = end_to_end_gradcheck(seed=seed)
        passed = max(res["coordinate"], res["directional"]) < 1e-4
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} end-to-end loss  {res}")
    return 0 if ok else 1


def cmd_selftest(args, values) -> int:
    from .selfcheck import run_selftest

    ok = True
    for name, passed, detail in run_selftest():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return 0 if ok else 1


COMMANDS = {
    "project": cmd_project,
    "train": lambda a, v: _train_like(a, v, "train"),
    "finetune": lambda a, v: _train_like(a, v, "finetune"),
    "infer": cmd_infer,
    "eval": cmd_eval,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve_settings(args)
        return COMMANDS[args.command](args, values)
    except LidarFlowError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
