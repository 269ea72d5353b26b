"""Command-line entry points: run odometry, evaluate trajectories, render
synthetic datasets."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import ConfigError, PipelineConfig, load_config
from .dataset_io import (DatasetError, load_kitti_sequence, read_trajectory_kitti,
                         write_image_png, write_trajectory_kitti)
from .evaluation import (EvaluationError, format_report, kitti_relative_errors,
                         write_segment_csv)
from .pipeline import PipelineError, run_pipeline
from .stereo_matcher import InitializationError
from .synthetic import render, scene_from_text

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


def _cmd_run(args) -> int:
    try:
        cfg = PipelineConfig()
        if args.config:
            cfg = load_config(args.config, cfg)
        overrides = {}
        if args.lam is not None:
            overrides["coupling_lambda"] = args.lam
        if args.seed is not None:
            overrides["seed"] = args.seed
        overrides["output_dir"] = args.output
        cfg = PipelineConfig(**{**cfg.__dict__, **overrides})
        manifest = load_kitti_sequence(args.dataset)
    except (ConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        result = run_pipeline(manifest, cfg, max_frames=args.max_frames)
    except (PipelineError, InitializationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    result.write(cfg.output_dir)
    print(f"processed {len(result.records)} frames -> {cfg.output_dir}")
    if not result.completed:
        print(f"halted early: {result.failure_reason}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_eval(args) -> int:
    try:
        gt = read_trajectory_kitti(args.gt)
        est = read_trajectory_kitti(args.est)
        times = None
        if args.times:
            times = np.array([float(line) for line in open(args.times, encoding="ascii")
                              if line.strip()])
        report = kitti_relative_errors(gt, est, times)
    except (DatasetError, EvaluationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    sys.stdout.write(format_report(report, title=f"eval {os.path.basename(args.est)}"))
    if args.csv:
        write_segment_csv(report, args.csv)
        print(f"per-segment CSV -> {args.csv}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    try:
        with open(args.scene, "r", encoding="ascii") as fh:
            scene = scene_from_text(fh.read())
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot parse scene file: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = args.output
    os.makedirs(os.path.join(out, "image_0"), exist_ok=True)
    os.makedirs(os.path.join(out, "image_1"), exist_ok=True)
    intr = scene.intrinsics
    with open(os.path.join(out, "calib.txt"), "w", encoding="ascii") as fh:
        p0 = [intr.fx, 0.0, intr.cx, 0.0, 0.0, intr.fy, intr.cy, 0.0, 0.0, 0.0, 1.0, 0.0]
        p1 = list(p0)
        p1[3] = -intr.fx * scene.rig.baseline
        fh.write("P0: " + " ".join("%.12e" % v for v in p0) + "\n")
        fh.write("P1: " + " ".join("%.12e" % v for v in p1) + "\n")
    with open(os.path.join(out, "times.txt"), "w", encoding="ascii") as fh:
        for t in scene.timestamps():
            fh.write("%.6e\n" % t)
    poses = [scene.pose(i) for i in range(scene.num_frames)]
    write_trajectory_kitti(poses, os.path.join(out, "gt_poses.txt"))
    for i in range(scene.num_frames):
        left, _ = render(scene, i, "left")
        right, _ = render(scene, i, "right")
        write_image_png(left, os.path.join(out, "image_0", f"{i:06d}.png"))
        write_image_png(right, os.path.join(out, "image_1", f"{i:06d}.png"))
    print(f"rendered {scene.num_frames} stereo frames -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stereo-vo",
                                     description="Stereo direct sparse visual odometry")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run odometry on a KITTI-format sequence")
    p_run.add_argument("--dataset", required=True, help="sequence directory")
    p_run.add_argument("--config", help="key=value config file")
    p_run.add_argument("--output", required=True, help="output directory")
    p_run.add_argument("--lambda", dest="lam", type=float, default=None,
                       help="static-stereo coupling factor override")
    p_run.add_argument("--max-frames", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.set_defaults(func=_cmd_run)

    p_eval = sub.add_parser("eval", help="KITTI-protocol relative errors")
    p_eval.add_argument("--gt", required=True, help="ground-truth pose file")
    p_eval.add_argument("--est", required=True, help="estimated pose file")
    p_eval.add_argument("--times", help="timestamps file for speed bins")
    p_eval.add_argument("--csv", help="write per-segment CSV here")
    p_eval.set_defaults(func=_cmd_eval)

    p_synth = sub.add_parser("synth", help="render a synthetic scene to a dataset dir")
    p_synth.add_argument("--scene", required=True, help="scene description file")
    p_synth.add_argument("--output", required=True, help="dataset directory to create")
    p_synth.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
