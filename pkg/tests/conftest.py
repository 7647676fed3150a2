import math

import numpy as np
import pytest

from radarslam.local_map import create_map
from radarslam.se2 import Pose2
from radarslam.simulator import RadarParams, Trajectory, World, polar_to_cartesian, render_scan

RES = 0.5
SIZE = 501


@pytest.fixture(scope="session")
def world():
    return World.random(600, 250, seed=3)


@pytest.fixture(scope="session")
def radar():
    return RadarParams(n_ranges=201, motion_distortion=False)


@pytest.fixture(scope="session")
def map_at(world, radar):
    """Factory: local map rendered by a stationary sensor at ``pose``."""

    def make(pose: Pose2, seed: int = 1, w: World | None = None):
        scan = render_scan(w or world, Trajectory.stationary(pose, 1.0), 0.0, radar, np.random.default_rng(seed))
        return create_map(polar_to_cartesian(scan, SIZE, RES, intensity_offset=0.09), pose, RES)

    return make


def random_pose(rng, xy=10.0, theta=math.pi):
    return Pose2(rng.uniform(-xy, xy), rng.uniform(-xy, xy), rng.uniform(-theta, theta))


# -- acceptance criterion reporting -----------------------------------------
_CRITERIA: dict[int, list[tuple[str, bool, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA.setdefault(marker.args[0], []).append((item.name, rep.passed and rep.when == "call", detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        ok = all(r[1] for r in results)
        details = " | ".join(f"{name}: {d}" if d else name for name, _, d in results)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  ({details})")
