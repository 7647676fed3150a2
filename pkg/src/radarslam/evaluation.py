"""Trajectory and loop-registration metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .se2 import Pose2, between, compose, poses_to_array, wrap_angle


@dataclass
class AlignedTrajectoryError:
    ate: float
    alignment: Pose2  # applied to the estimate
    per_pose_errors: np.ndarray


@dataclass
class RegistrationStats:
    matches: int
    inliers: int
    inlier_ratio: float
    inlier_pos_rmse: float
    inlier_rot_rmse: float  # degrees


def _as_array(traj) -> np.ndarray:
    if isinstance(traj, np.ndarray):
        return np.asarray(traj, dtype=float).reshape(-1, 3)
    traj = list(traj)
    if traj and isinstance(traj[0], Pose2):
        return poses_to_array(traj)
    return np.asarray(traj, dtype=float).reshape(-1, 3)


def align_svd(estimate, ground_truth) -> Pose2:
    """Rigid transform ``A`` minimising ``sum |A * p_est - p_gt|^2`` (no scale)."""
    est, gt = _as_array(estimate), _as_array(ground_truth)
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) < 2:
        raise ValueError("alignment needs at least two poses")
    P, Q = est[:, :2], gt[:, :2]
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mp, Q - mq
    if np.allclose(Pc, 0.0) or np.allclose(Qc, 0.0):
        raise ValueError("degenerate point set: all positions identical")
    U, _, Vt = np.linalg.svd(Pc.T @ Qc)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, d]) @ U.T
    t = mq - R @ mp
    return Pose2(t[0], t[1], math.atan2(R[1, 0], R[0, 0]))


def ate(estimate, ground_truth) -> AlignedTrajectoryError:
    est, gt = _as_array(estimate), _as_array(ground_truth)
    A = align_svd(est, gt)
    c, s = math.cos(A.theta), math.sin(A.theta)
    moved = est[:, :2] @ np.array([[c, s], [-s, c]]) + [A.x, A.y]
    errs = np.linalg.norm(moved - gt[:, :2], axis=1)
    return AlignedTrajectoryError(float(np.sqrt(np.mean(errs**2))), A, errs)


def epe(estimate, ground_truth) -> float:
    """Translation norm of ``(GT_N^-1 GT_1) (EST_1^-1 EST_N)``."""
    est, gt = _as_array(estimate), _as_array(ground_truth)
    if len(est) < 2 or len(gt) < 2:
        raise ValueError("end-pose error needs at least two poses")
    g1, gN = Pose2.from_array(gt[0]), Pose2.from_array(gt[-1])
    e1, eN = Pose2.from_array(est[0]), Pose2.from_array(est[-1])
    E = compose(between(gN, g1), between(e1, eN))
    return float(math.hypot(E.x, E.y))


def registration_stats(
    results: Sequence[tuple[Pose2, Pose2]], pos_gate: float = 1.5, rot_gate_deg: float = 1.0
) -> RegistrationStats:
    """Inliers have position error below ``pos_gate`` and rotation error below ``rot_gate_deg``."""
    pos, rot = [], []
    for est, true in results:
        pos.append(math.hypot(est.x - true.x, est.y - true.y))
        rot.append(abs(math.degrees(wrap_angle(est.theta - true.theta))))
    pos, rot = np.asarray(pos), np.asarray(rot)
    inl = (pos < pos_gate) & (rot < rot_gate_deg)
    n, k = len(results), int(inl.sum())
    return RegistrationStats(
        n,
        k,
        k / n if n else 0.0,
        float(np.sqrt(np.mean(pos[inl] ** 2))) if k else float("nan"),
        float(np.sqrt(np.mean(rot[inl] ** 2))) if k else float("nan"),
    )


def associate(est_stamps, gt_stamps, max_dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour timestamp association; pairs further than ``max_dt`` apart are dropped."""
    est_stamps = np.asarray(est_stamps, dtype=float)
    gt_stamps = np.asarray(gt_stamps, dtype=float)
    if len(gt_stamps) == 0 or len(est_stamps) == 0:
        return np.empty(0, np.intp), np.empty(0, np.intp)
    order = np.argsort(gt_stamps)
    sorted_gt = gt_stamps[order]
    if len(sorted_gt) == 1:
        k = np.zeros(len(est_stamps), np.intp)
    else:
        k = np.clip(np.searchsorted(sorted_gt, est_stamps), 1, len(sorted_gt) - 1)
        left, right = sorted_gt[k - 1], sorted_gt[k]
        k = np.where(np.abs(est_stamps - left) <= np.abs(right - est_stamps), k - 1, k)
    dt = np.abs(sorted_gt[k] - est_stamps)
    keep = dt <= max_dt
    return np.flatnonzero(keep), order[k[keep]]


def associated_trajectories(
    est_stamps, est_poses, gt_stamps, gt_poses, period: float | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Matched ``(stamps, estimate, ground truth)`` using a half-period window."""
    est_stamps = np.asarray(est_stamps, dtype=float)
    if period is None:
        period = float(np.median(np.diff(est_stamps))) if len(est_stamps) > 1 else 1.0
    ie, ig = associate(est_stamps, gt_stamps, 0.5 * period)
    return est_stamps[ie], _as_array(est_poses)[ie], _as_array(gt_poses)[ig]


def write_metrics_json(path: str | Path, metrics: dict) -> None:
    def default(o):
        if isinstance(o, Pose2):
            return {"x": o.x, "y": o.y, "theta": o.theta}
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        raise TypeError(f"not serialisable: {type(o).__name__}")

    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True, default=default) + "\n")


def write_errors_csv(path: str | Path, stamps, errors) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stamp", "error"])
        for t, e in zip(stamps, errors):
            w.writerow([repr(float(t)), repr(float(e))])


def trajectory_svg(
    path: str | Path,
    trajectories: dict[str, np.ndarray],
    colors: Sequence[str] = ("#222222", "#d62728", "#1f77b4", "#2ca02c"),
    size: int = 600,
    margin: int = 30,
) -> None:
    """Overlay of named 2D trajectories as a standalone SVG file."""
    arrays = {k: _as_array(v)[:, :2] for k, v in trajectories.items()}
    pts = np.concatenate([a for a in arrays.values() if len(a)]) if arrays else np.zeros((1, 2))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = max(float((hi - lo).max()), 1e-9)
    scale = (size - 2 * margin) / span

    def xy(p):
        return margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for k, (name, a) in enumerate(arrays.items()):
        color = colors[k % len(colors)]
        d = " ".join(f"{x:.2f},{y:.2f}" for x, y in map(xy, a))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{d}"/>')
        out.append(f'<text x="{margin}" y="{margin - 10 + 14 * k}" font-size="12" fill="{color}">{name}</text>')
    bar = 10 ** math.floor(math.log10(span / 4)) if span > 0 else 1.0
    out.append(
        f'<line x1="{size - margin - bar * scale:.2f}" y1="{size - 12}" x2="{size - margin}" y2="{size - 12}" '
        f'stroke="black" stroke-width="2"/>'
    )
    out.append(f'<text x="{size - margin - bar * scale:.2f}" y="{size - 16}" font-size="11">{bar:g} m</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def aligned(estimate, alignment: Pose2) -> np.ndarray:
    """Apply ``alignment`` to every pose of ``estimate``."""
    est = _as_array(estimate)
    return poses_to_array([compose(alignment, Pose2.from_array(p)) for p in est])


__all__ = [
    "AlignedTrajectoryError",
    "RegistrationStats",
    "align_svd",
    "ate",
    "epe",
    "registration_stats",
    "associate",
    "associated_trajectories",
    "write_metrics_json",
    "write_errors_csv",
    "trajectory_svg",
    "aligned",
]
