"""End-to-end SLAM: odometry, place recognition, two-stage loop registration
and pose-graph optimisation.

Every odometry frame becomes a pose-graph node. Keyframes are offered to the
place recogniser; each proposed loop is registered coarsely from features,
refined by direct correlation and gated on the scaled score, and every
accepted loop triggers a warm-started re-optimisation whose result is
spliced in before the next frame.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .coarse_reg import Keypoint, coarse_register, detect_and_describe
from .config import PipelineConfig
from .direct_reg import register
from .local_map import LocalMap
from .odometry import OdometryFrame, RadarOdometry, _gyro_arrays
from .place_recognition import LoopCandidate, PlaceRecognitionWorker, PlaceRecognizer
from .pose_graph import (
    BiasFactor,
    GraphState,
    LoopFactor,
    OdometryFactor,
    PoseGraph,
    SolveReport,
)
from .se2 import Pose2, compose
from .simulator import PolarScan


@dataclass
class LoopRecord:
    query_frame: int  # newer
    match_frame: int  # older
    raplace_score: float
    coarse: Pose2 | None = None
    coarse_inliers: int = 0
    coarse_scale: float = float("nan")
    fine: Pose2 | None = None
    score_s: float = float("nan")
    stage: str = "proposed"  # proposed | coarse_rejected | fine_rejected | accepted

    @property
    def transform(self) -> Pose2 | None:
        """Pose of the query frame in the match frame's map frame."""
        return self.fine if self.fine is not None else self.coarse


@dataclass
class RunReport:
    stamps: np.ndarray
    poses: np.ndarray  # final estimate, (N, 3)
    odometry_poses: np.ndarray  # dead-reckoned odometry, (N, 3)
    biases: np.ndarray | None
    keyframes: int = 0
    candidates: int = 0
    coarse_inlier_pass: int = 0
    coarse_accepted: int = 0  # inlier and scale gates passed
    fine_accepted: int = 0  # scaled-score gate passed (equals coarse_accepted when coarse-only)
    solves: int = 0
    loops: list[LoopRecord] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)  # seconds per stage
    calls: dict[str, int] = field(default_factory=dict)
    graph: PoseGraph | None = field(default=None, repr=False)
    state: GraphState | None = field(default=None, repr=False)

    @property
    def loop_factors(self) -> int:
        return sum(1 for r in self.loops if r.stage == "accepted")

    def summary(self) -> dict:
        return {
            "frames": int(len(self.poses)),
            "keyframes": self.keyframes,
            "candidates": self.candidates,
            "coarse_inlier_pass": self.coarse_inlier_pass,
            "coarse_accepted": self.coarse_accepted,
            "fine_accepted": self.fine_accepted,
            "loop_factors": self.loop_factors,
            "solves": self.solves,
            "timings_s": {k: round(v, 6) for k, v in self.timings.items()},
            "calls": dict(self.calls),
            "loops": [
                {
                    "query_frame": r.query_frame,
                    "match_frame": r.match_frame,
                    "raplace_score": r.raplace_score,
                    "coarse_inliers": r.coarse_inliers,
                    "coarse_scale": r.coarse_scale,
                    "score_s": r.score_s,
                    "stage": r.stage,
                    "transform": None if r.transform is None else list(r.transform.as_array()),
                }
                for r in self.loops
            ],
        }


class _Timer:
    def __init__(self):
        self.total = defaultdict(float)
        self.calls = defaultdict(int)

    def __call__(self, stage: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.total[stage] += time.perf_counter() - self.t0
                timer.calls[stage] += 1

        return _Ctx()


class _KeyframeStore:
    """Keyframe map snapshots, kept compact, with lazily cached keypoints."""

    def __init__(self):
        self._maps: dict[int, tuple[Pose2, np.ndarray, float, float]] = {}
        self._keypoints: dict[int, list[Keypoint]] = {}

    def add(self, frame_index: int, snap: LocalMap) -> None:
        self._maps[frame_index] = (snap.anchor, snap.grid.astype(np.float32), snap.resolution, snap.stamp)

    def map(self, frame_index: int) -> LocalMap:
        anchor, grid, res, stamp = self._maps[frame_index]
        return LocalMap(anchor, grid.astype(float), res, stamp=stamp)

    def keypoints(self, frame_index: int) -> list[Keypoint]:
        if frame_index not in self._keypoints:
            self._keypoints[frame_index] = detect_and_describe(self._maps[frame_index][1])
        return self._keypoints[frame_index]


class SlamPipeline:
    """Incremental driver; call :meth:`process` per scan and :meth:`finish` at the end."""

    def __init__(self, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()
        c = self.config
        self.odometry = RadarOdometry(c.odometry_config())
        self.recognizer = PlaceRecognizer(
            c.n_angles, c.n_freqs, c.descriptor_size, c.drift_rate, c.r_min, c.d_min, c.descriptor_smoothing
        )
        self.worker = None if c.deterministic else PlaceRecognitionWorker(self.recognizer)
        self.graph = PoseGraph(0, use_bias=c.bias_states, bias_sign=c.bias_sign)
        if c.bias_states:
            self.graph.bias_prior = (0.0, 1.0 / c.bias_prior_sigma**2)
        self.poses: list[np.ndarray] = []
        self.biases: list[float] = []
        self.stamps: list[float] = []
        self.odom_poses: list[np.ndarray] = []
        self.frames: list[OdometryFrame] = []
        self.store = _KeyframeStore()
        self.timer = _Timer()
        self.loops: list[LoopRecord] = []
        self.solves = 0
        self.solve_reports: list[SolveReport] = []
        self.keyframes = 0
        sx, sy, st = c.odom_sigma
        self._loop_info = np.diag([1 / sx**2, 1 / sy**2, 1 / st**2]) / c.loop_covariance_scale

    # -- per-frame -------------------------------------------------------
    def process(self, scan: PolarScan, gyro=None) -> OdometryFrame:
        c = self.config
        with self.timer("odometry"):
            frame = self.odometry.process_scan(scan, gyro if c.use_gyro else None)
        self._add_node(frame)

        # the first scan's map is only undistorted once a velocity is known,
        # so frame 0 is never a keyframe
        if frame.index == 0:
            frame.discard_snapshot()
        elif self.worker is None:
            if frame.index % c.keyframe_every == 0:
                with self.timer("place_recognition"):
                    snap = frame.map_snapshot
                    self.store.add(frame.index, snap)
                    cand = self.recognizer.try_keyframe(
                        snap, frame.pose, frame.distance_travelled, False, frame.index, frame.stamp
                    )
                self.keyframes += 1
                if cand is not None:
                    self._handle_candidate(cand)
            else:
                frame.discard_snapshot()
        else:
            for cand in self.worker.poll():
                self._handle_candidate(cand)
            if not self.worker.busy:
                snap = frame.map_snapshot
                self.store.add(frame.index, snap)
                if self.worker.submit(snap, frame.pose, frame.distance_travelled, frame.index, frame.stamp):
                    self.keyframes += 1
            else:
                frame.discard_snapshot()
        return frame

    def _add_node(self, frame: OdometryFrame) -> None:
        c = self.config
        m = self.graph.add_node()
        self.frames.append(frame)
        self.stamps.append(frame.stamp)
        self.odom_poses.append(frame.pose.as_array())
        b_ref = frame.bias_estimate if frame.bias_estimate is not None else 0.0
        if m == 0:
            self.poses.append(frame.pose.as_array())
            self.biases.append(b_ref)
            return
        dt = frame.stamp - self.stamps[-2]
        # the odometry integrated this step with the bias reported on this frame
        self.graph.add_odometry(OdometryFactor(m - 1, frame.relative_pose, frame.odom_information, dt, b_ref))
        if self.graph.use_bias:
            self.graph.add_bias_factor(BiasFactor(m - 1, 1.0 / (c.bias_random_walk**2 * dt)))
            if m == 1:
                self.biases[0] = b_ref
        prev = Pose2.from_array(self.poses[-1])
        self.poses.append(compose(prev, frame.relative_pose).as_array())
        self.biases.append(self.biases[-1] if self.graph.use_bias else b_ref)

    # -- loop closures ---------------------------------------------------
    def _handle_candidate(self, cand: LoopCandidate) -> None:
        c = self.config
        q, mt = cand.query_frame, cand.match_frame
        rec = LoopRecord(q, mt, cand.raplace_score)
        self.loops.append(rec)
        moving, fixed = self.store.map(mt), self.store.map(q)
        with self.timer("coarse_registration"):
            coarse = coarse_register(
                moving, fixed, c.ratio_test, c.ransac_iters, c.ransac_inlier_tol, c.min_inliers,
                c.scale_tolerance, c.ransac_seed, self.store.keypoints(mt), self.store.keypoints(q),
            )
        rec.coarse, rec.coarse_inliers, rec.coarse_scale = coarse.transform, coarse.inliers, coarse.scale
        if coarse.inliers >= c.min_inliers:
            rec.stage = "coarse_inliers"
        if not coarse.accepted:
            rec.stage = "coarse_rejected"
            return
        measurement = coarse.transform
        if not c.coarse_only:
            with self.timer("fine_registration"):
                fine = register(
                    moving, fixed, coarse.transform, c.grid_half_widths, c.grid_steps
                )
            rec.fine, rec.score_s = fine.transform, fine.score_s
            if fine.score_s < c.s_threshold:
                rec.stage = "fine_rejected"
                return
            measurement = fine.transform
        rec.stage = "accepted"
        self.graph.add_loop(LoopFactor(mt, q, measurement, self._loop_info))
        self._solve()

    def _state(self) -> GraphState:
        return GraphState(np.array(self.poses), np.array(self.biases) if self.graph.use_bias else None)

    def _solve(self) -> None:
        c = self.config
        rep = SolveReport()
        with self.timer("optimization"):
            st = self.graph.optimize(
                self._state(), c.cauchy_schedule, c.max_solver_iters, c.solver_tolerance, report=rep
            )
        self.solves += 1
        self.solve_reports.append(rep)
        self.poses = list(st.poses)
        if st.biases is not None:
            self.biases = list(st.biases)

    # -- wrap-up ---------------------------------------------------------
    def finish(self) -> RunReport:
        if self.worker is not None:
            for cand in self.worker.drain():
                self._handle_candidate(cand)
            self.worker.close()
            self.worker = None
        counts = {
            "candidates": len(self.loops),
            "coarse_inlier_pass": sum(r.coarse_inliers >= self.config.min_inliers for r in self.loops),
            "coarse_accepted": sum(r.stage in ("fine_rejected", "accepted") for r in self.loops),
            "fine_accepted": sum(r.stage == "accepted" for r in self.loops),
        }
        return RunReport(
            stamps=np.array(self.stamps),
            poses=np.array(self.poses).reshape(-1, 3),
            odometry_poses=np.array(self.odom_poses).reshape(-1, 3),
            biases=np.array(self.biases) if self.graph.use_bias else None,
            keyframes=self.keyframes,
            solves=self.solves,
            loops=self.loops,
            timings=dict(self.timer.total),
            calls=dict(self.timer.calls),
            graph=self.graph,
            state=self._state(),
            **counts,
        )


def run_slam(scans: Iterable[PolarScan], gyro=None, config: PipelineConfig | None = None) -> RunReport:
    """Run the full pipeline over a time-ordered scan stream."""
    pipe = SlamPipeline(config)
    gyro = _gyro_arrays(gyro) if gyro is not None else None
    for scan in scans:
        pipe.process(scan, gyro)
    return pipe.finish()


def simulate_from_config(config: PipelineConfig, seed: int = 0):
    """Simulated square-loop sequence described by the ``sim_*`` settings."""
    from .simulator import RadarParams, World, simulate_sequence, square_waypoints

    c = config
    world = World.random(c.sim_world_points, c.sim_world_extent, seed=seed)
    half = c.sim_side / 2.0
    params = RadarParams(
        n_azimuths=c.sim_n_azimuths, n_ranges=c.sim_n_ranges, range_resolution=c.sim_range_resolution
    )
    return simulate_sequence(
        world,
        square_waypoints(c.sim_side, (-half, -half)),
        c.sim_speed,
        gyro_bias=c.sim_gyro_bias,
        params=params,
        seed=seed,
        gyro_noise=c.sim_gyro_noise,
        stop_at_start=c.sim_stop,
        overlap=c.sim_overlap,
    )
