"""Command-line interface: ``simulate``, ``run``, ``eval`` and ``plot``.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on data
errors (missing, empty or malformed input files).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .evaluation import aligned, associated_trajectories, ate, epe, trajectory_svg, write_errors_csv, write_metrics_json
from .pipeline import run_slam, simulate_from_config
from .pose_graph import write_g2o
from .se2 import Pose2
from .simulator import read_gyro_csv, read_scan, read_trajectory_csv, write_gyro_csv, write_scan, write_trajectory_csv

SCAN_SUFFIX = ".rscan"
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radarslam", description="2D spinning-radar SLAM toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="JSON file overriding PipelineConfig defaults")
        sp.add_argument("--seed", type=int, default=0, help="seed for every random draw")

    s = sub.add_parser("simulate", help="render a square-loop sequence to scan files")
    common(s)
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.add_argument("--frames", type=int, default=0, help="keep only the first N scans (0 = all)")

    r = sub.add_parser("run", help="run SLAM over a directory of scan files")
    common(r)
    r.add_argument("scans", type=Path, help="directory holding *.rscan files")
    r.add_argument("--out", type=Path, required=True, help="output directory")
    r.add_argument("--gyro", type=Path, help="gyro CSV (default: gyro.csv in the scan directory if present)")
    r.add_argument("--deterministic", action="store_true", help="keyframe every k-th frame, no background worker")
    r.add_argument("--threaded", action="store_true", help="background place-recognition worker")
    r.add_argument("--no-gyro", action="store_true", help="ignore the gyro; no bias states")
    r.add_argument("--no-bias", action="store_true", help="keep the odometry bias estimates fixed")
    r.add_argument("--coarse-only", action="store_true", help="skip the direct refinement stage")
    r.add_argument("--no-local-map", action="store_true", help="register against the previous scan only")

    e = sub.add_parser("eval", help="compare an estimated trajectory with ground truth")
    e.add_argument("estimate", type=Path)
    e.add_argument("ground_truth", type=Path)
    e.add_argument("--out", type=Path, help="metrics JSON (default: stdout only)")
    e.add_argument("--errors", type=Path, help="per-pose aligned error CSV")

    pl = sub.add_parser("plot", help="draw trajectories as an SVG")
    pl.add_argument("trajectories", type=Path, nargs="+", help="trajectory CSV files")
    pl.add_argument("--ground-truth", type=Path, help="align every trajectory to this one first")
    pl.add_argument("--out", type=Path, required=True)
    return p


def _load_config(args) -> PipelineConfig:
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    return cfg


def _read_trajectory(path: Path):
    try:
        stamps, poses = read_trajectory_csv(path)
    except FileNotFoundError as exc:
        raise DataError(f"no such file: {path}") from exc
    except (ValueError, KeyError) as exc:
        raise DataError(f"malformed trajectory {path}: {exc}") from exc
    if len(poses) == 0:
        raise DataError(f"empty trajectory: {path}")
    return stamps, np.array([p.as_array() for p in poses])


# -- subcommands -----------------------------------------------------------
def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    if args.frames < 0:
        raise UsageError("--frames must be non-negative")
    seq = simulate_from_config(cfg, args.seed)
    n = len(seq.scans) if args.frames == 0 else min(args.frames, len(seq.scans))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for k, scan in enumerate(seq.scans[:n]):
        write_scan(out / f"scan_{k:06d}{SCAN_SUFFIX}", scan)
    last = seq.scans[n - 1].stamp + seq.params.scan_duration if n else 0.0
    write_gyro_csv(out / "gyro.csv", [g for g in seq.gyro if g.stamp < last])
    write_trajectory_csv(out / "ground_truth.csv", seq.stamps[:n], seq.gt_poses[:n])
    meta = {"seed": args.seed, "scans": n, "config": cfg.to_dict()}
    (out / "simulation.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {n} scans to {out}")
    return EXIT_OK


def _load_scans(directory: Path):
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    files = sorted(directory.glob(f"*{SCAN_SUFFIX}"))
    if not files:
        raise DataError(f"no {SCAN_SUFFIX} scan files in {directory}")
    scans = []
    for f in files:
        try:
            scans.append(read_scan(f))
        except (ValueError, KeyError, IndexError) as exc:
            raise DataError(f"malformed scan {f}: {exc}") from exc
    scans.sort(key=lambda s: s.stamp)
    stamps = [s.stamp for s in scans]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise DataError("scan stamps are not strictly increasing")
    return scans


def cmd_run(args) -> int:
    if args.deterministic and args.threaded:
        raise UsageError("--deterministic and --threaded are mutually exclusive")
    cfg = _load_config(args)
    d = cfg.to_dict()
    d["noise_seed"] = args.seed
    d["ransac_seed"] = args.seed
    if args.deterministic:
        d["deterministic"] = True
    if args.threaded:
        d["deterministic"] = False
    cfg = PipelineConfig.from_dict(d).ablated(
        no_gyro=args.no_gyro, no_bias=args.no_bias, coarse_only=args.coarse_only, no_local_map=args.no_local_map
    )

    scans = _load_scans(args.scans)
    gyro = None
    gyro_path = args.gyro or (args.scans / "gyro.csv")
    if cfg.use_gyro and (args.gyro or gyro_path.exists()):
        try:
            gyro = read_gyro_csv(gyro_path)
        except FileNotFoundError as exc:
            raise DataError(f"no such file: {gyro_path}") from exc
        except (ValueError, KeyError) as exc:
            raise DataError(f"malformed gyro file {gyro_path}: {exc}") from exc
    if gyro is None and cfg.use_gyro:
        cfg = cfg.ablated(no_gyro=True)
        print("no gyro data found; running radar-only", file=sys.stderr)

    report = run_slam(scans, gyro, cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(out / "trajectory.csv", report.stamps, [Pose2.from_array(p) for p in report.poses])
    write_trajectory_csv(out / "odometry.csv", report.stamps, [Pose2.from_array(p) for p in report.odometry_poses])
    summary = report.summary()
    summary["config"] = cfg.to_dict()
    if report.biases is not None:
        summary["biases"] = report.biases.tolist()
    write_metrics_json(out / "report.json", summary)
    write_g2o(out / "graph.g2o", report.graph, report.state)
    print(
        f"{len(scans)} frames, {report.keyframes} keyframes, {report.candidates} candidates, "
        f"{report.loop_factors} loop closures"
    )
    return EXIT_OK


def _evaluate(est_path: Path, gt_path: Path):
    est_t, est = _read_trajectory(est_path)
    gt_t, gt = _read_trajectory(gt_path)
    t, est_m, gt_m = associated_trajectories(est_t, est, gt_t, gt)
    if len(t) < 2:
        raise DataError("fewer than two poses could be associated by timestamp")
    return t, est_m, gt_m


def cmd_eval(args) -> int:
    t, est, gt = _evaluate(args.estimate, args.ground_truth)
    try:
        res = ate(est, gt)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    metrics = {
        "poses": int(len(t)),
        "ate": res.ate,
        "epe": epe(est, gt),
        "alignment": res.alignment,
        "max_error": float(res.per_pose_errors.max()),
    }
    if args.out:
        write_metrics_json(args.out, metrics)
    if args.errors:
        write_errors_csv(args.errors, t, res.per_pose_errors)
    print(f"ATE {metrics['ate']:.4f} m  EPE {metrics['epe']:.4f} m over {len(t)} poses")
    return EXIT_OK


def cmd_plot(args) -> int:
    trajs = {}
    gt = None
    if args.ground_truth:
        gt_t, gt = _read_trajectory(args.ground_truth)
        trajs["ground truth"] = gt
    for path in args.trajectories:
        t, est = _read_trajectory(path)
        if gt is not None:
            _, est_m, gt_m = associated_trajectories(t, est, gt_t, gt)
            if len(est_m) >= 2:
                est = aligned(est, ate(est_m, gt_m).alignment)
        trajs[path.stem] = est
    args.out.parent.mkdir(parents=True, exist_ok=True)
    trajectory_svg(args.out, trajs)
    print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "eval": cmd_eval, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help and usage errors
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"radarslam {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"radarslam {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
