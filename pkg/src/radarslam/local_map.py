"""Cartesian local maps built by per-pixel exponential low-pass filtering."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .se2 import Pose2, compose, inverse, transform_point
from .simulator import cartesian_grid


class BilinearSampler:
    """Bilinear interpolation of a grid with zero padding outside it.

    Points are metric ``(x, y)`` in the grid frame; the grid centre pixel is
    the origin, columns follow x and rows follow y.
    """

    def __init__(self, grid: np.ndarray, resolution: float):
        grid = np.asarray(grid, dtype=float)
        self.size = grid.shape[0]
        self.resolution = float(resolution)
        self.centre = (self.size - 1) / 2.0
        self.padded = np.zeros((self.size + 2, self.size + 2))
        self.padded[1:-1, 1:-1] = grid

    def _locate(self, pts: np.ndarray):
        pts = np.asarray(pts, dtype=float)
        u = pts[..., 0] / self.resolution + self.centre + 1.0
        v = pts[..., 1] / self.resolution + self.centre + 1.0
        inside = (u >= 0.0) & (v >= 0.0) & (u < self.size + 1) & (v < self.size + 1)
        u = np.where(inside, u, 0.0)
        v = np.where(inside, v, 0.0)
        i0 = np.floor(u).astype(np.intp)
        j0 = np.floor(v).astype(np.intp)
        return inside, i0, j0, u - i0, v - j0

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        inside, i0, j0, fu, fv = self._locate(pts)
        P = self.padded
        v00, v10 = P[j0, i0], P[j0, i0 + 1]
        v01, v11 = P[j0 + 1, i0], P[j0 + 1, i0 + 1]
        val = (1 - fv) * ((1 - fu) * v00 + fu * v10) + fv * ((1 - fu) * v01 + fu * v11)
        return np.where(inside, val, 0.0)

    def value_and_gradient(self, pts: np.ndarray):
        """Interpolated values and their derivatives w.r.t. metric x and y."""
        inside, i0, j0, fu, fv = self._locate(pts)
        P = self.padded
        v00, v10 = P[j0, i0], P[j0, i0 + 1]
        v01, v11 = P[j0 + 1, i0], P[j0 + 1, i0 + 1]
        val = (1 - fv) * ((1 - fu) * v00 + fu * v10) + fv * ((1 - fu) * v01 + fu * v11)
        gx = ((1 - fv) * (v10 - v00) + fv * (v11 - v01)) / self.resolution
        gy = ((1 - fu) * (v01 - v00) + fu * (v11 - v10)) / self.resolution
        z = np.zeros_like(val)
        return np.where(inside, val, z), np.where(inside, gx, z), np.where(inside, gy, z)


@dataclass
class LocalMap:
    """Square intensity grid centred on ``anchor`` (a world/odometry-frame pose)."""

    anchor: Pose2
    grid: np.ndarray
    resolution: float
    weights: np.ndarray = None
    stamp: float = 0.0
    _sampler: BilinearSampler | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim != 2 or self.grid.shape[0] != self.grid.shape[1]:
            raise ValueError("local map grid must be square")
        if self.grid.shape[0] % 2 == 0:
            raise ValueError("local map size must be odd")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if np.any(self.grid < 0):
            raise ValueError("local map intensities must be non-negative")
        if self.weights is None:
            self.weights = np.ones_like(self.grid)

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    @property
    def half_extent(self) -> float:
        return (self.size - 1) / 2.0 * self.resolution

    @property
    def sampler(self) -> BilinearSampler:
        if self._sampler is None:
            self._sampler = BilinearSampler(self.grid, self.resolution)
        return self._sampler

    def pixel_points(self) -> np.ndarray:
        """Metric coordinates of every pixel, shape (S, S, 2)."""
        x, y = cartesian_grid(self.size, self.resolution)
        return np.stack([x, y], axis=-1)

    def copy(self) -> "LocalMap":
        return LocalMap(self.anchor, self.grid.copy(), self.resolution, self.weights.copy(), self.stamp)


def create_map(
    first_scan_cartesian: np.ndarray,
    anchor: Pose2,
    resolution: float,
    size: int | None = None,
    stamp: float = 0.0,
) -> LocalMap:
    grid = np.array(first_scan_cartesian, dtype=float)
    if size is not None and grid.shape != (size, size):
        raise ValueError(f"scan grid {grid.shape} does not match map size {size}")
    return LocalMap(anchor, grid, resolution, np.ones_like(grid), stamp)


def sample_bilinear(local_map: LocalMap, p) -> np.ndarray | float:
    """Intensity at metric point(s) in the map frame; zero outside the grid."""
    p = np.asarray(p, dtype=float)
    out = local_map.sampler(p)
    return float(out) if p.ndim == 1 else out


def update_map(
    local_map: LocalMap,
    scan_cartesian: np.ndarray,
    scan_pose_in_map: Pose2,
    alpha: float,
    max_range: float | None = None,
    stamp: float | None = None,
) -> LocalMap:
    """Low-pass the map towards a scan placed at ``scan_pose_in_map``.

    Only pixels within ``max_range`` of the scan origin are observed; the
    rest keep their previous value. The scan grid shares the map resolution.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    scan_cartesian = np.asarray(scan_cartesian, dtype=float)
    if scan_cartesian.ndim != 2 or scan_cartesian.shape[0] != scan_cartesian.shape[1]:
        raise ValueError("scan grid must be square")
    if max_range is None:
        max_range = (scan_cartesian.shape[0] - 1) / 2.0 * local_map.resolution

    pts = local_map.pixel_points().reshape(-1, 2)
    q = transform_point(inverse(scan_pose_in_map), pts)
    observed = np.hypot(q[:, 0], q[:, 1]) <= max_range
    vals = BilinearSampler(scan_cartesian, local_map.resolution)(q[observed])

    grid = local_map.grid.copy().reshape(-1)
    weights = local_map.weights.copy().reshape(-1)
    grid[observed] = (1.0 - alpha) * grid[observed] + alpha * vals
    weights[observed] += 1.0
    np.clip(grid, 0.0, None, out=grid)
    return LocalMap(
        local_map.anchor,
        grid.reshape(local_map.grid.shape),
        local_map.resolution,
        weights.reshape(local_map.grid.shape),
        local_map.stamp if stamp is None else stamp,
    )


def resample_map(local_map: LocalMap, new_anchor: Pose2, stamp: float | None = None) -> LocalMap:
    """Re-centre a map on ``new_anchor`` (same size and resolution)."""
    rel = compose(inverse(local_map.anchor), new_anchor)
    pts = transform_point(rel, local_map.pixel_points().reshape(-1, 2))
    shape = local_map.grid.shape
    grid = local_map.sampler(pts).reshape(shape)
    weights = BilinearSampler(local_map.weights, local_map.resolution)(pts).reshape(shape)
    return LocalMap(
        new_anchor,
        np.clip(grid, 0.0, None),
        local_map.resolution,
        weights,
        local_map.stamp if stamp is None else stamp,
    )


def export_pgm(local_map: LocalMap, path: str | Path) -> None:
    """16-bit binary PGM, max-normalised, plus a ``.txt`` sidecar with the anchor."""
    path = Path(path)
    g = local_map.grid
    peak = g.max()
    scaled = np.zeros(g.shape, dtype=">u2") if peak <= 0 else np.rint(g / peak * 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{g.shape[1]} {g.shape[0]}\n65535\n".encode("ascii"))
        f.write(scaled.tobytes())
    a = local_map.anchor
    path.with_suffix(".txt").write_text(
        f"anchor {a.x!r} {a.y!r} {a.theta!r}\nresolution {local_map.resolution!r}\n"
        f"stamp {local_map.stamp!r}\nmax_intensity {float(peak)!r}\n"
    )


def import_pgm(path: str | Path) -> LocalMap:
    path = Path(path)
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw[pos : pos + 2 * w * h], dtype=">u2").reshape(h, w).astype(float)
    meta = dict(line.split(" ", 1) for line in path.with_suffix(".txt").read_text().splitlines())
    anchor = Pose2(*(float(v) for v in meta["anchor"].split()))
    peak = float(meta.get("max_intensity", maxval))
    return LocalMap(anchor, data / maxval * peak, float(meta["resolution"]), stamp=float(meta["stamp"]))
