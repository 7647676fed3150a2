"""Synthetic spinning-radar data: point-reflector worlds, motion-distorted
polar scans, gyroscope streams and ground-truth trajectories.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .se2 import Pose2, compose, inverse, wrap_angle


@dataclass
class DynamicReflector:
    """Reflector moving along a straight line: ``start + velocity * t``."""

    start: tuple[float, float]
    velocity: tuple[float, float]
    reflectivity: float = 1.0

    def positions(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.stack(
            [self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t], axis=-1
        )


@dataclass
class World:
    """Static point reflectors as an (n, 3) array of ``x, y, reflectivity``."""

    reflectors: np.ndarray
    dynamic_reflectors: list[DynamicReflector] = field(default_factory=list)
    extent: float = 300.0

    def __post_init__(self):
        self.reflectors = np.asarray(self.reflectors, dtype=float).reshape(-1, 3)
        refl = self.reflectors[:, 2]
        if np.any(refl < 0) or np.any(refl > 1):
            raise ValueError("reflectivity must lie in [0, 1]")
        if np.any(np.abs(self.reflectors[:, :2]) > self.extent):
            raise ValueError("reflector outside world extent")
        for d in self.dynamic_reflectors:
            if not 0.0 <= d.reflectivity <= 1.0:
                raise ValueError("reflectivity must lie in [0, 1]")

    @classmethod
    def random(
        cls,
        n: int,
        extent: float,
        seed: int | None = None,
        reflectivity: tuple[float, float] = (0.4, 1.0),
        min_spacing: float = 0.0,
    ) -> "World":
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-extent, extent, size=(n, 2))
        if min_spacing > 0:
            keep = []
            for p in pts:
                if all(np.hypot(*(p - q)) >= min_spacing for q in keep):
                    keep.append(p)
            pts = np.array(keep).reshape(-1, 2)
        refl = rng.uniform(*reflectivity, size=len(pts))
        return cls(np.column_stack([pts, refl]), extent=extent)


@dataclass
class RadarParams:
    n_azimuths: int = 400
    n_ranges: int = 512
    range_resolution: float = 0.5  # m/bin
    scan_duration: float = 0.25  # s, one revolution
    beam_width: float = math.radians(0.9)  # angular std of the blob, rad
    range_sigma: float = 0.5  # m
    noise_floor: float = 0.05
    noise_sigma: float = 0.01
    attenuation_knee: float = 60.0  # m; amplitude ~ (knee / r)^2 beyond it
    motion_distortion: bool = True

    def validate(self):
        if self.scan_duration <= 0:
            raise ValueError("scan duration must be positive")
        if self.range_resolution <= 0:
            raise ValueError("range resolution must be positive")
        if self.n_azimuths < 4 or self.n_ranges < 2:
            raise ValueError("radar geometry too small")
        if self.beam_width <= 0 or self.range_sigma <= 0:
            raise ValueError("blob widths must be positive")

    @property
    def max_range(self) -> float:
        return (self.n_ranges - 1) * self.range_resolution


@dataclass
class PolarScan:
    """One radar revolution; row k covers sensor-frame angle ``2*pi*k/A``."""

    intensities: np.ndarray  # (A, R), >= 0
    azimuth_timestamps: np.ndarray  # (A,)
    range_resolution: float
    stamp: float

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=float)
        self.azimuth_timestamps = np.asarray(self.azimuth_timestamps, dtype=float)
        if self.intensities.ndim != 2:
            raise ValueError("intensities must be 2-D")
        if len(self.azimuth_timestamps) != self.intensities.shape[0]:
            raise ValueError("one timestamp per azimuth required")
        if np.any(np.diff(self.azimuth_timestamps) <= 0):
            raise ValueError("azimuth timestamps must be strictly increasing")
        if np.any(self.intensities < 0):
            raise ValueError("intensities must be non-negative")

    @property
    def n_azimuths(self) -> int:
        return self.intensities.shape[0]

    @property
    def n_ranges(self) -> int:
        return self.intensities.shape[1]

    @property
    def azimuths(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_azimuths) / self.n_azimuths

    @property
    def max_range(self) -> float:
        return (self.n_ranges - 1) * self.range_resolution

    @property
    def duration(self) -> float:
        a = self.azimuth_timestamps
        return float(a[-1] - a[0]) * self.n_azimuths / max(self.n_azimuths - 1, 1)


@dataclass(frozen=True)
class GyroSample:
    stamp: float
    omega: float


@dataclass(frozen=True)
class TrajectorySample:
    stamp: float
    pose: Pose2


class Trajectory:
    """Densely sampled ground-truth motion, queried by linear interpolation."""

    def __init__(self, t: np.ndarray, x: np.ndarray, y: np.ndarray, theta_unwrapped: np.ndarray):
        self.t = np.asarray(t, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.theta = np.asarray(theta_unwrapped, dtype=float)
        self.omega = np.gradient(self.theta, self.t) if len(self.t) > 1 else np.zeros(1)

    @classmethod
    def stationary(cls, pose: Pose2, duration: float) -> "Trajectory":
        t = np.array([0.0, duration])
        return cls(t, [pose.x] * 2, [pose.y] * 2, [pose.theta] * 2)

    @property
    def duration(self) -> float:
        return float(self.t[-1])

    def poses_at(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        th = np.interp(times, self.t, self.theta)
        return np.stack(
            [np.interp(times, self.t, self.x), np.interp(times, self.t, self.y), wrap_angle(th)], axis=-1
        )

    def pose(self, t: float) -> Pose2:
        return Pose2(*self.poses_at(np.array([t]))[0])

    def yaw_rate(self, times) -> np.ndarray:
        return np.interp(np.asarray(times, dtype=float), self.t, self.omega)

    def __call__(self, t: float) -> Pose2:
        return self.pose(t)


def _poses_for_times(sensor_trajectory, times: np.ndarray) -> np.ndarray:
    if hasattr(sensor_trajectory, "poses_at"):
        return sensor_trajectory.poses_at(times)
    return np.array([sensor_trajectory(float(t)).as_array() for t in times])


def render_scan(
    world: World,
    sensor_trajectory: Callable[[float], Pose2] | Trajectory,
    scan_start: float,
    params: RadarParams | None = None,
    rng: np.random.Generator | None = None,
) -> PolarScan:
    """Render one polar scan; each azimuth row uses the sensor pose at its own time."""
    params = params or RadarParams()
    params.validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    A, R, res = params.n_azimuths, params.n_ranges, params.range_resolution

    az_times = scan_start + params.scan_duration * np.arange(A) / A
    render_times = az_times if params.motion_distortion else np.full(A, float(scan_start))
    poses = _poses_for_times(sensor_trajectory, render_times)  # (A, 3)
    az = 2.0 * np.pi * np.arange(A) / A

    img = np.zeros((A, R))
    pts = [world.reflectors[None, :, :2].repeat(A, axis=0)]
    refl = [np.broadcast_to(world.reflectors[:, 2], (A, len(world.reflectors)))]
    for d in world.dynamic_reflectors:
        pts.append(d.positions(render_times)[:, None, :])
        refl.append(np.full((A, 1), d.reflectivity))
    pts = np.concatenate(pts, axis=1)  # (A, n, 2)
    refl = np.concatenate(refl, axis=1)

    if pts.shape[1]:
        c, s = np.cos(poses[:, 2])[:, None], np.sin(poses[:, 2])[:, None]
        dx = pts[..., 0] - poses[:, 0, None]
        dy = pts[..., 1] - poses[:, 1, None]
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        rng_m = np.hypot(lx, ly)
        dang = wrap_angle(np.arctan2(ly, lx) - az[:, None])
        sig_a = params.beam_width
        mask = (np.abs(dang) < 4.0 * sig_a) & (rng_m < params.max_range + 4 * params.range_sigma)
        mask &= rng_m > 2.0 * params.range_sigma
        rows, cols = np.nonzero(mask)
        if len(rows):
            r = rng_m[rows, cols]
            atten = np.minimum(1.0, (params.attenuation_knee / np.maximum(r, 1e-9)) ** 2)
            amp = refl[rows, cols] * atten * np.exp(-0.5 * (dang[rows, cols] / sig_a) ** 2)
            half = int(math.ceil(4.0 * params.range_sigma / res))
            offs = np.arange(-half, half + 1)
            centre = np.rint(r / res).astype(int)
            bins = centre[:, None] + offs[None, :]
            vals = amp[:, None] * np.exp(-0.5 * ((bins * res - r[:, None]) / params.range_sigma) ** 2)
            ok = (bins >= 0) & (bins < R)
            np.add.at(img, (np.broadcast_to(rows[:, None], bins.shape)[ok], bins[ok]), vals[ok])

    img += params.noise_floor + params.noise_sigma * rng.standard_normal(img.shape)
    np.clip(img, 0.0, None, out=img)
    return PolarScan(img, az_times, res, float(scan_start))


def cartesian_grid(size_px: int, resolution: float) -> tuple[np.ndarray, np.ndarray]:
    """Metric (x, y) of every pixel; the sensor sits at the centre pixel and
    column index grows with x, row index with y."""
    c = (size_px - 1) / 2.0
    ax = (np.arange(size_px) - c) * resolution
    return np.meshgrid(ax, ax)


@lru_cache(maxsize=8)
def _disk_geometry(size_px: int, resolution: float, radius: float):
    """Flat indices and coordinates of the pixels within ``radius`` of the centre."""
    x, y = cartesian_grid(size_px, resolution)
    r = np.hypot(x, y)
    idx = np.flatnonzero(r <= radius)
    xs, ys = x.ravel()[idx], y.ravel()[idx]
    a = np.mod(np.arctan2(ys, xs), 2.0 * np.pi)
    for arr in (idx, xs, ys, a):
        arr.setflags(write=False)
    return idx, xs, ys, a


def polar_to_cartesian(
    scan: PolarScan,
    size_px: int,
    resolution: float,
    velocity: Sequence[float] | None = None,
    intensity_offset: float = 0.0,
) -> np.ndarray:
    """Bilinearly resample a polar scan onto a square Cartesian grid.

    ``velocity`` is an optional body-frame twist ``(vx, vy, omega)`` per
    second; when given, every pixel is looked up in the azimuth acquired at
    the matching time, which undistorts the scan into its start frame.
    ``intensity_offset`` is subtracted (and clipped at zero) before
    resampling to remove the noise floor.
    """
    if size_px <= 0 or resolution <= 0:
        raise ValueError("size and resolution must be positive")
    if size_px % 2 == 0:
        raise ValueError("size_px must be odd so the sensor sits on a pixel")
    A, R = scan.intensities.shape
    polar = scan.intensities
    if intensity_offset:
        polar = np.clip(polar - intensity_offset, 0.0, None)
    padded = np.vstack([polar, polar[:1]])

    deskew = velocity is not None and np.any(np.asarray(velocity) != 0)
    # motion within one revolution can pull in points from slightly beyond max range
    reach = scan.max_range
    if deskew:
        vx, vy, w = (float(v) for v in velocity)
        reach += math.hypot(vx, vy) * scan.duration + abs(w) * scan.duration * scan.max_range
    idx, x, y, a = _disk_geometry(size_px, float(resolution), float(reach))

    if deskew:
        rel_t = scan.azimuth_timestamps - scan.stamp
        spacing = np.diff(rel_t)
        uniform = np.allclose(spacing, spacing[0])
        qx, qy, qa = x, y, a
        for _ in range(2):
            k = qa / (2.0 * np.pi) * A
            if uniform:
                tau = rel_t[0] + k * spacing[0]
            else:
                tau = np.interp(k, np.arange(A + 1), np.append(rel_t, rel_t[-1] + scan.duration / A))
            th = w * tau
            c, s = np.cos(th), np.sin(th)
            dx, dy = x - vx * tau, y - vy * tau
            # sensor frame at time tau: q = R(th)^T (p - t)
            qx = c * dx + s * dy
            qy = -s * dx + c * dy
            qa = np.mod(np.arctan2(qy, qx), 2.0 * np.pi)
        r = np.hypot(qx, qy)
        a = qa
    else:
        r = np.hypot(x, y)

    vals = ndimage.map_coordinates(
        padded, [a / (2.0 * np.pi) * A, r / scan.range_resolution], order=1, mode="constant", cval=0.0
    )
    vals[r > scan.max_range] = 0.0
    out = np.zeros(size_px * size_px)
    out[idx] = vals
    return out.reshape(size_px, size_px)


# ---------------------------------------------------------------------------
# sequences


def trajectory_from_waypoints(
    waypoints: Sequence[Pose2],
    speed: float,
    stop_at_start: float = 0.0,
    dt: float = 1e-3,
    overlap: float = 0.0,
) -> Trajectory:
    """Constant-speed C1 path through the waypoint positions.

    The path is a cubic spline parameterised by chord length (periodic when
    the first and last waypoints coincide); heading follows the tangent.
    A closed path can be driven ``overlap`` meters past its starting point.
    """
    if len(waypoints) < 2:
        raise ValueError("need at least two waypoints")
    if speed <= 0:
        raise ValueError("speed must be positive")
    if overlap < 0:
        raise ValueError("overlap must be non-negative")
    pts = np.array([[w.x, w.y] for w in waypoints])
    seg = np.hypot(*np.diff(pts, axis=0).T)
    if np.any(seg < 1e-9):
        raise ValueError("degenerate waypoints: repeated consecutive points")
    u = np.concatenate([[0.0], np.cumsum(seg)])
    closed = len(pts) > 3 and np.allclose(pts[0], pts[-1])
    if overlap > 0 and not closed:
        raise ValueError("overlap needs a closed path")
    spline = CubicSpline(u, pts, bc_type="periodic" if closed else "not-a-knot")

    u_end = u[-1] + overlap * 1.5  # chord length >= arc length; trimmed below
    uu = np.linspace(0.0, u_end, max(2000, int(u_end / 0.01)))
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(spline(uu), axis=0).T))])
    total = float(np.interp(u[-1], uu, arc)) + overlap
    move_t = np.arange(0.0, total / speed + dt, dt)
    move_t[-1] = min(move_t[-1], total / speed)
    u_of_t = np.interp(move_t * speed, arc, uu)
    xy = spline(u_of_t)
    tan = spline(u_of_t, 1)
    heading = np.unwrap(np.arctan2(tan[:, 1], tan[:, 0]))

    t = move_t
    x, y = xy[:, 0], xy[:, 1]
    if stop_at_start > 0:
        n_stop = int(round(stop_at_start / dt))
        t_stop = np.arange(n_stop) * dt
        t = np.concatenate([t_stop, move_t + n_stop * dt])
        x = np.concatenate([np.full(n_stop, x[0]), x])
        y = np.concatenate([np.full(n_stop, y[0]), y])
        heading = np.concatenate([np.full(n_stop, heading[0]), heading])
    traj = Trajectory(t, x, y, heading)
    if stop_at_start > 0:
        traj.omega[: int(round(stop_at_start / dt)) + 1] = 0.0
    return traj


@dataclass
class SimulatedSequence:
    scans: list[PolarScan]
    gyro: list[GyroSample]
    ground_truth: list[TrajectorySample]
    seed_odometry: list[Pose2]  # relative poses between consecutive scans
    trajectory: Trajectory
    world: World
    params: RadarParams

    @property
    def gt_poses(self) -> list[Pose2]:
        return [s.pose for s in self.ground_truth]

    @property
    def stamps(self) -> np.ndarray:
        return np.array([s.stamp for s in self.ground_truth])

    def gyro_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([g.stamp for g in self.gyro]), np.array([g.omega for g in self.gyro]))


def simulate_sequence(
    world: World,
    waypoints: Sequence[Pose2] | None,
    speed: float,
    gyro_bias: float = 0.0,
    odom_noise: Sequence[float] = (0.0, 0.0, 0.0),
    params: RadarParams | None = None,
    seed: int = 0,
    gyro_rate: float = 100.0,
    gyro_noise: float = 1e-3,
    stop_at_start: float = 0.0,
    trajectory: Trajectory | None = None,
    overlap: float = 0.0,
) -> SimulatedSequence:
    """Simulate scans, gyro and ground truth along a waypoint path.

    Pass ``trajectory`` instead of waypoints to reuse a prepared path (for
    example a stationary one).
    """
    params = params or RadarParams()
    params.validate()
    rng = np.random.default_rng(seed)
    if trajectory is None:
        trajectory = trajectory_from_waypoints(waypoints, speed, stop_at_start=stop_at_start, overlap=overlap)

    period = params.scan_duration
    n_scans = int(math.floor(trajectory.duration / period + 1e-9))
    stamps = np.arange(n_scans) * period
    scans = [render_scan(world, trajectory, float(t), params, rng) for t in stamps]
    gt = [TrajectorySample(float(t), Pose2(*p)) for t, p in zip(stamps, trajectory.poses_at(stamps))]

    g_t = np.arange(0.0, trajectory.duration, 1.0 / gyro_rate)
    omega = trajectory.yaw_rate(g_t) + gyro_bias + gyro_noise * rng.standard_normal(len(g_t))
    gyro = [GyroSample(float(t), float(w)) for t, w in zip(g_t, omega)]

    sx, sy, st = (float(v) for v in odom_noise)
    odom = []
    for a, b in zip(gt[:-1], gt[1:]):
        rel = compose(inverse(a.pose), b.pose)
        if sx or sy or st:
            rel = compose(rel, Pose2(sx * rng.standard_normal(), sy * rng.standard_normal(), st * rng.standard_normal()))
        odom.append(rel)
    return SimulatedSequence(scans, gyro, gt, odom, trajectory, world, params)


def square_waypoints(
    side: float, origin=(0.0, 0.0), corner_radius: float = 20.0, spacing: float = 5.0
) -> list[Pose2]:
    """Closed square loop with corners at ``origin`` and ``origin + side``.

    Corners are rounded with arcs of ``corner_radius`` (bounding the yaw
    rate at a given speed) and the path is sampled every ``spacing``
    meters. The loop starts in the middle of the bottom side heading +x.
    """
    if not 0.0 <= corner_radius <= side / 2.0:
        raise ValueError("corner_radius must lie in [0, side / 2]")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    ox, oy = origin
    R, L = corner_radius, side - 2.0 * corner_radius
    perimeter = 4.0 * L + 2.0 * math.pi * R
    n = max(8, int(math.ceil(perimeter / spacing)))
    # walk the rounded square from the bottom-side midpoint, counter-clockwise
    pieces = []
    heading = 0.0
    centers = [(side - R, R), (side - R, side - R), (R, side - R), (R, R)]
    for k in range(4):
        pieces.append(("line", L / 2.0 if k == 0 else L))
        pieces.append(("arc", centers[k], heading))
        heading += math.pi / 2.0
    pieces.append(("line", L / 2.0))
    pts = []
    for s_ in np.arange(n) * perimeter / n:
        x, y, left = side / 2.0, 0.0, s_
        direction = 0.0
        for piece in pieces:
            if piece[0] == "line":
                step = min(left, piece[1])
                x += step * math.cos(direction)
                y += step * math.sin(direction)
                left -= step
            else:
                arc_len = math.pi / 2.0 * R
                step = min(left, arc_len)
                cx, cy = piece[1]
                a0 = piece[2] - math.pi / 2.0
                a = a0 + (step / R if R > 0 else 0.0)
                x, y = cx + R * math.cos(a), cy + R * math.sin(a)
                left -= step
                if step == arc_len:
                    direction = piece[2] + math.pi / 2.0
            if left <= 0:
                break
        pts.append((ox + x, oy + y))
    pts.append(pts[0])
    return [Pose2(px, py, 0.0) for px, py in pts]


# ---------------------------------------------------------------------------
# file formats

_SCAN_MAGIC = "RADARSCAN 1"


def write_scan(path: str | Path, scan: PolarScan) -> None:
    """Text header then row-major little-endian float32 intensities."""
    A, R = scan.intensities.shape
    header = [
        _SCAN_MAGIC,
        f"azimuths {A}",
        f"ranges {R}",
        f"range_resolution {scan.range_resolution!r}",
        f"stamp {scan.stamp!r}",
        "azimuth_timestamps " + " ".join(repr(float(t)) for t in scan.azimuth_timestamps),
        "data",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(scan.intensities.astype("<f4").tobytes(order="C"))


def read_scan(path: str | Path) -> PolarScan:
    with open(path, "rb") as f:
        raw = f.read()
    fields = {}
    pos = 0
    for _ in range(7):
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if line == "data":
            break
        key, _, value = line.partition(" ")
        fields[key] = value
    else:
        raise ValueError(f"{path}: malformed scan header")
    if fields.get("RADARSCAN") != "1":
        raise ValueError(f"{path}: not a scan file")
    A, R = int(fields["azimuths"]), int(fields["ranges"])
    data = np.frombuffer(raw[pos:], dtype="<f4")
    if data.size != A * R:
        raise ValueError(f"{path}: expected {A * R} floats, found {data.size}")
    ts = np.array([float(v) for v in fields["azimuth_timestamps"].split()])
    return PolarScan(
        data.reshape(A, R).astype(float), ts, float(fields["range_resolution"]), float(fields["stamp"])
    )


def write_trajectory_csv(path: str | Path, stamps: Sequence[float], poses: Sequence[Pose2]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stamp", "x", "y", "theta"])
        for t, p in zip(stamps, poses):
            w.writerow([repr(float(t)), repr(p.x), repr(p.y), repr(p.theta)])


def read_trajectory_csv(path: str | Path) -> tuple[np.ndarray, list[Pose2]]:
    stamps, poses = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"stamp", "x", "y", "theta"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns stamp,x,y,theta")
        for row in reader:
            stamps.append(float(row["stamp"]))
            poses.append(Pose2(float(row["x"]), float(row["y"]), float(row["theta"])))
    return np.array(stamps), poses


def write_gyro_csv(path: str | Path, gyro: Sequence[GyroSample]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stamp", "omega"])
        for g in gyro:
            w.writerow([repr(g.stamp), repr(g.omega)])


def read_gyro_csv(path: str | Path) -> list[GyroSample]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"stamp", "omega"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns stamp,omega")
        return [GyroSample(float(r["stamp"]), float(r["omega"])) for r in reader]
