"""Feature-based coarse registration of local-map images.

SIFT keypoints (OpenCV) are matched by brute force with a ratio test, and a
similarity transform is fitted with 2-point RANSAC. The similarity's scale
is only used as a sanity gate; the rigid part is returned in meters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .local_map import LocalMap
from .se2 import Pose2


@dataclass
class Keypoint:
    position: np.ndarray  # (col, row) in pixels, sub-pixel
    scale: float
    orientation: float  # rad
    descriptor: np.ndarray  # (128,), unit norm


@dataclass
class CoarseResult:
    transform: Pose2  # fixed-map frame -> moving-map frame, meters
    scale: float
    inliers: int
    matches: int
    accepted: bool
    inlier_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, bool), repr=False)


def to_uint8(grid: np.ndarray, gamma: float = 0.5) -> np.ndarray:
    """Compress a non-negative intensity grid into an 8-bit image."""
    g = np.asarray(grid, dtype=float)
    peak = g.max()
    if peak <= 0:
        return np.zeros(g.shape, np.uint8)
    return np.clip(np.rint(255.0 * (g / peak) ** gamma), 0, 255).astype(np.uint8)


def detect_and_describe(
    grid: np.ndarray,
    n_octave_layers: int = 3,
    contrast_threshold: float = 0.04,
    edge_threshold: float = 10.0,
    sigma: float = 1.6,
    max_features: int = 0,
) -> list[Keypoint]:
    """Difference-of-Gaussians keypoints with 128-D gradient-histogram descriptors."""
    if isinstance(grid, LocalMap):
        grid = grid.grid
    img = to_uint8(grid)
    if not img.any():
        return []
    sift = cv2.SIFT_create(
        nfeatures=max_features,
        nOctaveLayers=n_octave_layers,
        contrastThreshold=contrast_threshold,
        edgeThreshold=edge_threshold,
        sigma=sigma,
    )
    kps, desc = sift.detectAndCompute(img, None)
    if desc is None:
        return []
    out = []
    for kp, d in zip(kps, desc.astype(float)):
        n = np.linalg.norm(d)
        if n == 0:
            continue
        out.append(Keypoint(np.array(kp.pt, dtype=float), float(kp.size), math.radians(kp.angle), d / n))
    return out


def brute_force_match(a: list[Keypoint], b: list[Keypoint], ratio: float = 0.8) -> list[tuple[int, int]]:
    """Nearest-neighbour descriptor matches passing the ratio test.

    When several ``a`` keypoints pick the same ``b`` keypoint only the closest
    is kept.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    if not a or not b:
        return []
    da = np.array([k.descriptor for k in a])
    db = np.array([k.descriptor for k in b])
    d2 = np.maximum((da**2).sum(1)[:, None] + (db**2).sum(1)[None, :] - 2.0 * da @ db.T, 0.0)
    dist = np.sqrt(d2)
    order = np.argsort(dist, axis=1)
    best = order[:, 0]
    d1 = dist[np.arange(len(a)), best]
    if len(b) > 1:
        d_second = dist[np.arange(len(a)), order[:, 1]]
        ok = d1 < ratio * d_second
    else:
        ok = np.ones(len(a), bool)
    chosen: dict[int, tuple[float, int]] = {}
    for i in np.flatnonzero(ok):
        j = int(best[i])
        if j not in chosen or d1[i] < chosen[j][0]:
            chosen[j] = (float(d1[i]), int(i))
    return sorted((i, j) for j, (_, i) in chosen.items())


def _fit_similarity(p: np.ndarray, q: np.ndarray) -> tuple[complex, complex]:
    """Least-squares ``q ~ a p + b`` for complex point arrays."""
    pm, qm = p.mean(), q.mean()
    dp = p - pm
    den = np.sum(np.abs(dp) ** 2)
    if den == 0:
        return complex("nan"), complex("nan")
    a = np.sum((q - qm) * np.conj(dp)) / den
    return a, qm - a * pm


def ransac_similarity(
    src_px: np.ndarray,
    dst_px: np.ndarray,
    resolution: float = 1.0,
    iters: int = 2000,
    inlier_tol: float = 3.0,
    min_inliers: int = 15,
    scale_tol: float = 0.05,
    seed: int | np.random.Generator | None = 0,
    center_px: float | tuple[float, float] = 0.0,
) -> CoarseResult:
    """Fit ``dst ~ s R src + t`` robustly and return its rigid part.

    Points are pixel coordinates ``(col, row)``; ``center_px`` is the pixel
    holding the map origin, and ``resolution`` converts the translation to
    meters. The result is accepted when enough pairs agree with the returned
    rigid transform and the scale is within ``scale_tol`` of one.
    """
    src = np.asarray(src_px, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst_px, dtype=float).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("source and destination must have the same length")
    if len(src) < 2:
        raise ValueError("need at least two correspondences")
    cx, cy = (center_px, center_px) if np.ndim(center_px) == 0 else center_px
    p = (src[:, 0] - cx) + 1j * (src[:, 1] - cy)
    q = (dst[:, 0] - cx) + 1j * (dst[:, 1] - cy)
    n = len(p)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    i1 = rng.integers(0, n, iters)
    i2 = (i1 + rng.integers(1, n, iters)) % n
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (q[i2] - q[i1]) / (p[i2] - p[i1])
        b = q[i1] - a * p[i1]
    good = np.isfinite(a) & np.isfinite(b)
    best_mask = np.zeros(n, bool)
    if good.any():
        a, b = a[good], b[good]
        err = np.abs(a[:, None] * p[None, :] + b[:, None] - q[None, :])
        inl = err < inlier_tol
        counts = inl.sum(axis=1)
        cost = np.where(inl, err, inlier_tol).sum(axis=1)
        top = np.flatnonzero(counts == counts.max())
        best_mask = inl[top[np.argmin(cost[top])]]

    if best_mask.sum() >= 2:
        mask = best_mask
        for _ in range(5):
            a_fit, b_fit = _fit_similarity(p[mask], q[mask])
            new = np.abs(a_fit * p + b_fit - q) < inlier_tol
            if new.sum() < 2 or np.array_equal(new, mask):
                break
            mask = new
        a_fit, b_fit = _fit_similarity(p[mask], q[mask])
    else:
        a_fit, b_fit = complex("nan"), complex("nan")

    if not (np.isfinite(a_fit) and np.isfinite(b_fit)) or a_fit == 0:
        return CoarseResult(Pose2(), float("nan"), 0, n, False, np.zeros(n, bool))

    scale = float(abs(a_fit))
    theta = float(np.angle(a_fit))
    rigid = np.exp(1j * theta)
    # re-verify with the rigid transform actually returned
    inlier_mask = np.abs(rigid * p + b_fit - q) < inlier_tol
    inliers = int(inlier_mask.sum())
    accepted = inliers >= min_inliers and abs(scale - 1.0) <= scale_tol
    T = Pose2(b_fit.real * resolution, b_fit.imag * resolution, theta)
    return CoarseResult(T, scale, inliers, n, bool(accepted), inlier_mask)


def coarse_register(
    moving: LocalMap,
    fixed: LocalMap,
    ratio: float = 0.8,
    iters: int = 2000,
    inlier_tol: float = 3.0,
    min_inliers: int = 15,
    scale_tol: float = 0.05,
    seed: int | None = 0,
    moving_keypoints: list[Keypoint] | None = None,
    fixed_keypoints: list[Keypoint] | None = None,
) -> CoarseResult:
    """Estimate the pose of ``fixed`` in ``moving``'s frame from map images.

    Only local-map snapshots are accepted: they are already undistorted, so
    no motion compensation happens here.
    """
    if not isinstance(moving, LocalMap) or not isinstance(fixed, LocalMap):
        raise TypeError("coarse registration consumes LocalMap snapshots only")
    if moving.grid.shape != fixed.grid.shape or moving.resolution != fixed.resolution:
        raise ValueError("maps must share size and resolution")
    kp_m = moving_keypoints if moving_keypoints is not None else detect_and_describe(moving.grid)
    kp_f = fixed_keypoints if fixed_keypoints is not None else detect_and_describe(fixed.grid)
    pairs = brute_force_match(kp_f, kp_m, ratio)
    if len(pairs) < 2:
        return CoarseResult(Pose2(), float("nan"), 0, len(pairs), False)
    src = np.array([kp_f[i].position for i, _ in pairs])
    dst = np.array([kp_m[j].position for _, j in pairs])
    c = (fixed.size - 1) / 2.0
    return ransac_similarity(src, dst, fixed.resolution, iters, inlier_tol, min_inliers, scale_tol, seed, c)


def dump_matches_csv(path: str | Path, src_px: np.ndarray, dst_px: np.ndarray, inlier_mask: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["src_col", "src_row", "dst_col", "dst_row", "inlier"])
        for s, d, m in zip(src_px, dst_px, inlier_mask):
            w.writerow([s[0], s[1], d[0], d[1], int(bool(m))])
