"""Scan-to-local-map radar odometry.

Each scan is undistorted with the previous velocity, converted to a
Cartesian grid and registered against a rolling low-pass local map by
direct correlation. The odometry emits relative poses, per-scan local-map
snapshots and, in gyro mode, a stop-based gyro bias estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .direct_reg import CorrelationObjective, grid_search, refine
from .local_map import LocalMap, create_map, resample_map, update_map
from .se2 import Pose2, between, compose, wrap_angle
from .simulator import GyroSample, PolarScan, polar_to_cartesian


@dataclass
class OdometryConfig:
    resolution: float = 0.5  # m/px
    map_margin: float = 0.25  # map half-size = max range * (1 + margin)
    alpha: float = 0.3  # low-pass gain
    intensity_offset: float = 0.09  # noise floor removed before mapping
    deskew: bool = True
    deskew_passes: int = 2  # re-undistort with the refined velocity
    deskew_tolerance: float = 0.1  # m of in-scan displacement change to trigger a pass
    use_gyro: bool = False
    estimate_bias: bool = True
    odom_sigma: tuple[float, float, float] = (0.1, 0.05, 0.005)
    gyro_sigma: float = 5e-4  # rad per frame, gyro-integrated rotation
    divergence_score: float = 0.2
    # recovery search when the score collapses relative to the previous frame
    recovery_ratio: float = 0.5
    recovery_half_widths: tuple[float, float, float] = (1.0, 1.0, math.radians(6.0))
    recovery_steps: tuple[int, int, int] = (5, 5, 13)
    stop_translation: float = 0.05  # m over the stop window
    stop_window: float = 1.0  # s
    reanchor_distance: float = 10.0  # m
    # Distance-proportional perturbation of the emitted odometry (per meter
    # travelled); emulates real-sensor drift on clean simulated data.
    output_noise: tuple[float, float, float] = (0.0, 0.0, 0.0)
    output_drift: float = 0.0  # rad per meter, systematic heading error
    noise_seed: int = 0
    refine_max_iters: int = 300
    refine_tolerance: float = 1e-4


@dataclass
class OdometryFrame:
    index: int
    stamp: float
    relative_pose: Pose2  # previous scan -> this scan; identity for the first scan
    odom_information: np.ndarray
    pose: Pose2  # integrated odometry pose
    bias_estimate: float | None = None
    score_s: float = 1.0
    flagged: bool = False
    distance_travelled: float = 0.0
    _snapshot: LocalMap | None = field(default=None, repr=False)
    _snapshot_source: tuple | None = field(default=None, repr=False)

    @property
    def map_snapshot(self) -> LocalMap:
        """Local map re-centred on this scan (built on first access)."""
        if self._snapshot is None:
            rolling, track_pose = self._snapshot_source
            snap = resample_map(rolling, track_pose, stamp=self.stamp)
            snap.anchor = self.pose
            self._snapshot = snap
            self._snapshot_source = None
        return self._snapshot

    def discard_snapshot(self) -> None:
        """Drop the reference to the rolling map once no snapshot is needed."""
        self._snapshot_source = None


def estimate_bias_at_stop(
    gyro_omegas: Sequence[float],
    window_duration: float,
    translation: float,
    max_translation: float = 0.05,
    min_duration: float = 1.0,
) -> float | None:
    """Mean yaw rate over a stationary window, or ``None`` if the platform moved."""
    if window_duration < min_duration or len(gyro_omegas) == 0:
        return None
    if translation >= max_translation:
        return None
    return float(np.mean(gyro_omegas))


def integrate_rate(stamps: np.ndarray, omegas: np.ndarray, t0: float, t1: float) -> float:
    """Integral of the piecewise-linear rate signal over ``[t0, t1]``."""
    inner = (stamps > t0) & (stamps < t1)
    ts = np.concatenate([[t0], stamps[inner], [t1]])
    ws = np.interp(ts, stamps, omegas)
    return float(np.sum(0.5 * (ws[1:] + ws[:-1]) * np.diff(ts)))


def _gyro_arrays(gyro) -> tuple[np.ndarray, np.ndarray]:
    if gyro is None:
        return np.empty(0), np.empty(0)
    if isinstance(gyro, tuple) and len(gyro) == 2 and not isinstance(gyro[0], GyroSample):
        return np.asarray(gyro[0], dtype=float), np.asarray(gyro[1], dtype=float)
    return np.array([g.stamp for g in gyro], dtype=float), np.array([g.omega for g in gyro], dtype=float)


class RadarOdometry:
    """Stateful odometry front end; feed scans in time order."""

    def __init__(self, config: OdometryConfig | None = None):
        self.config = config or OdometryConfig()
        self.map: LocalMap | None = None
        self.map_size: int | None = None
        self.max_range: float | None = None
        self.index = -1
        self.last_stamp: float | None = None
        self.pose = Pose2()  # emitted chain
        self.track_pose = Pose2()  # chain used for map bookkeeping
        self.last_track_rel = Pose2()
        self.last_dt: float | None = None
        self.bias = 0.0
        self.distance = 0.0
        self.last_score: float | None = None
        self.recoveries = 0
        self._stop_frames: list[tuple[float, Pose2, np.ndarray]] = []
        self._rng = np.random.default_rng(self.config.noise_seed)
        sx, sy, st = self.config.odom_sigma
        self._info = np.diag([1 / sx**2, 1 / sy**2, 1 / st**2])

    # -- helpers ---------------------------------------------------------
    def _setup(self, scan: PolarScan):
        c = self.config
        self.max_range = scan.max_range
        half = int(math.ceil(scan.max_range * (1.0 + c.map_margin) / c.resolution))
        self.map_size = 2 * half + 1

    def to_cartesian(self, scan: PolarScan, velocity=None) -> np.ndarray:
        return polar_to_cartesian(
            scan, self.map_size, self.config.resolution, velocity, self.config.intensity_offset
        )

    def _update_stop_state(self, dt: float, rel: Pose2, omegas: np.ndarray) -> None:
        c = self.config
        if math.hypot(rel.x, rel.y) >= c.stop_translation:
            self._stop_frames.clear()
            return
        self._stop_frames.append((dt, rel, omegas))
        while self._stop_frames:
            disp = Pose2()
            for _, r, _ in self._stop_frames:
                disp = compose(disp, r)
            if math.hypot(disp.x, disp.y) < c.stop_translation:
                break
            self._stop_frames.pop(0)
        if not self._stop_frames:
            return
        duration = sum(f[0] for f in self._stop_frames)
        samples = np.concatenate([f[2] for f in self._stop_frames])
        est = estimate_bias_at_stop(samples, duration, math.hypot(disp.x, disp.y), c.stop_translation, c.stop_window)
        if est is not None:
            self.bias = est

    # -- main entry ------------------------------------------------------
    def process_scan(self, scan: PolarScan, gyro=None) -> OdometryFrame:
        c = self.config
        if self.last_stamp is not None and scan.stamp <= self.last_stamp:
            raise ValueError(f"out-of-order scan stamp {scan.stamp} <= {self.last_stamp}")
        if self.map is None:
            self._setup(scan)
            cart = self.to_cartesian(scan)
            self.map = create_map(cart, Pose2(), c.resolution, self.map_size, scan.stamp)
            self._first_scan = scan
            self.index = 0
            self.last_stamp = scan.stamp
            self._first_frame = OdometryFrame(
                0, scan.stamp, Pose2(), self._info.copy(), Pose2(),
                self.bias if c.use_gyro else None,
                _snapshot_source=(self.map, self.track_pose),
            )
            return self._first_frame

        dt = scan.stamp - self.last_stamp
        velocity = None
        if c.deskew and self.last_dt:
            r = self.last_track_rel
            velocity = (r.x / self.last_dt, r.y / self.last_dt, r.theta / self.last_dt)

        # constant-velocity prediction, rotation from the gyro when available
        g_t, g_w = _gyro_arrays(gyro)
        in_span = (g_t >= self.last_stamp) & (g_t < scan.stamp)
        omegas = g_w[in_span]
        inc = self.last_track_rel if self.last_dt else Pose2()
        if self.last_dt and self.last_dt != dt:
            inc = Pose2(inc.x * dt / self.last_dt, inc.y * dt / self.last_dt, inc.theta * dt / self.last_dt)
        gyro_dtheta = None
        if c.use_gyro and len(omegas):
            gyro_dtheta = integrate_rate(g_t, g_w, self.last_stamp, scan.stamp) - self.bias * dt
            inc = Pose2(inc.x, inc.y, gyro_dtheta)

        init = compose(between(self.map.anchor, self.track_pose), inc)
        passes = max(1, c.deskew_passes) if c.deskew else 1
        for k in range(passes):
            if k and self.index == 0:
                # the first map was built from a distorted scan; rebuild it
                cart0 = self.to_cartesian(self._first_scan, velocity)
                self.map = create_map(cart0, Pose2(), c.resolution, self.map_size, self._first_scan.stamp)
                first = self._first_frame
                if first._snapshot is not None or first._snapshot_source is not None:
                    first._snapshot = None
                    first._snapshot_source = (self.map, Pose2())
            cart = self.to_cartesian(scan, velocity)
            obj = CorrelationObjective(self.map, LocalMap(Pose2(), cart, c.resolution))
            result = refine(obj, init, max_iters=c.refine_max_iters, tolerance=c.refine_tolerance)
            if self.last_score is not None and result.score_s < c.recovery_ratio * self.last_score:
                # a sudden change of turn rate can leave the prediction outside
                # the basin of attraction; widen the search before refining
                start = grid_search(obj, init, c.recovery_half_widths, c.recovery_steps)
                retry = refine(obj, start, max_iters=c.refine_max_iters, tolerance=c.refine_tolerance)
                if retry.score_g > result.score_g:
                    result = retry
                    self.recoveries += 1
            init = result.transform
            r = between(self.track_pose, compose(self.map.anchor, result.transform))
            refined = (r.x / dt, r.y / dt, r.theta / dt)
            if velocity is not None and self.index > 0:
                dv = np.subtract(refined, velocity)
                shift = (math.hypot(dv[0], dv[1]) + abs(dv[2]) * self.max_range) * scan.duration
                if shift < c.deskew_tolerance:
                    break
            velocity = refined
        new_track = compose(self.map.anchor, result.transform)
        track_rel = between(self.track_pose, new_track)

        info = self._info.copy()
        flagged = (not result.converged) and result.score_s < c.divergence_score
        if flagged:
            info /= 10.0

        # emitted relative pose: optional drift emulation, then gyro fusion
        rel = track_rel
        step = math.hypot(rel.x, rel.y)
        if any(c.output_noise) or c.output_drift:
            n = self._rng.standard_normal(3) * np.asarray(c.output_noise) * step
            n[2] += c.output_drift * step
            rel = compose(rel, Pose2(*n))
        if gyro_dtheta is not None:
            var_r = c.odom_sigma[2] ** 2
            var_g = c.gyro_sigma**2
            w = var_r / (var_r + var_g)
            theta = rel.theta + w * wrap_angle(gyro_dtheta - rel.theta)
            rel = Pose2(rel.x, rel.y, theta)
            info[2, 2] += 1.0 / var_g

        # map bookkeeping on the tracking chain
        self.map = update_map(
            self.map, cart, between(self.map.anchor, new_track), c.alpha, self.max_range, scan.stamp
        )
        if math.hypot(*between(self.map.anchor, new_track).translation) > c.reanchor_distance:
            self.map = resample_map(self.map, new_track, stamp=scan.stamp)

        bias_used = self.bias
        if c.use_gyro and c.estimate_bias:
            self._update_stop_state(dt, track_rel, omegas)

        self.track_pose = new_track
        self.last_track_rel = track_rel
        self.last_score = result.score_s
        self.last_dt = dt
        self.pose = compose(self.pose, rel)
        self.distance += step
        self.index += 1
        self.last_stamp = scan.stamp
        self._first_scan = None
        self._first_frame = None
        return OdometryFrame(
            self.index,
            scan.stamp,
            rel,
            info,
            self.pose,
            bias_used if c.use_gyro else None,
            result.score_s,
            flagged,
            self.distance,
            _snapshot_source=(self.map, self.track_pose),
        )


def run_odometry(scans: Sequence[PolarScan], gyro=None, config: OdometryConfig | None = None) -> list[OdometryFrame]:
    """Process a whole sequence; ``gyro`` is the full gyro stream or ``None``."""
    odo = RadarOdometry(config)
    return [odo.process_scan(s, gyro) for s in scans]
