import csv
import math
import threading

import numpy as np
import pytest

from radarslam.local_map import create_map
from radarslam.place_recognition import (
    PlaceDescriptor,
    PlaceRecognitionWorker,
    PlaceRecognizer,
    make_descriptor,
    match_score,
    radon_sinogram,
    search_radius,
)
from radarslam.se2 import Pose2

N = 65
C = (N - 1) / 2.0


def blobs(centers, n=N, sigma=1.5, weights=None):
    """Image of isotropic Gaussians at ``(x, y)`` offsets from the centre pixel."""
    yy, xx = np.mgrid[0:n, 0:n] - (n - 1) / 2.0
    img = np.zeros((n, n))
    for k, (x, y) in enumerate(centers):
        w = 1.0 if weights is None else weights[k]
        img += w * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * sigma**2))
    return img


def random_centers(seed, k=12, radius=20.0):
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.uniform(0, 1, k))
    a = rng.uniform(0, 2 * np.pi, k)
    return np.column_stack([r * np.cos(a), r * np.sin(a)])


def blob_map(seed, n=129, k=40):
    pts = random_centers(seed, k, radius=0.4 * n)
    w = np.random.default_rng(seed + 1000).uniform(0.3, 1.0, k)
    return create_map(blobs(pts, n, 1.5, w), Pose2(), 1.0)


class TestRadon:
    def test_zero_image(self):
        assert not radon_sinogram(np.zeros((21, 21)), 12).any()

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            radon_sinogram(np.zeros((5, 7)))

    def test_mass_conserved_per_angle(self):
        img = blobs(random_centers(0))
        sino = radon_sinogram(img, 36)
        np.testing.assert_allclose(sino.sum(axis=1), img.sum(), rtol=0.01)

    def test_centered_disk_is_angle_independent(self):
        yy, xx = np.mgrid[0:N, 0:N] - C
        disk = ((xx**2 + yy**2) <= 15**2).astype(float)
        sino = radon_sinogram(disk, 90)
        dev = np.abs(sino - sino.mean(axis=0)).max(axis=1)
        assert np.all(dev < 0.02 * sino.sum(axis=1))

    @pytest.mark.parametrize("m", [1, 7, 30])
    def test_rotation_is_row_shift(self, m):
        n_angles = 60
        phi = math.pi * m / n_angles
        pts = random_centers(1)
        R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
        orig = radon_sinogram(blobs(pts), n_angles)
        rot = radon_sinogram(blobs(pts @ R.T), n_angles)
        # row k of the rotated image is row k - m of the original; rows that
        # wrap past pi come back with the offset axis reversed
        expected = np.vstack([orig[n_angles - m :, ::-1], orig[: n_angles - m]])
        assert np.abs(rot - expected).max() < 0.05 * orig.max()


class TestDescriptor:
    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            make_descriptor(np.zeros((129, 129)))

    def test_entries_nonnegative_and_shape(self):
        d = make_descriptor(blob_map(0))
        assert d.spectrum.shape == (180, 64)
        assert np.all(d.spectrum >= 0)
        assert d.norm == pytest.approx(np.linalg.norm(d.spectrum))

    def test_scaled_intensities_scale_exactly(self):
        m = blob_map(1)
        d = make_descriptor(m)
        np.testing.assert_array_equal(make_descriptor(m.grid * 2.0).spectrum, 2.0 * d.spectrum)
        np.testing.assert_allclose(make_descriptor(m.grid * 3.0).spectrum, 3.0 * d.spectrum, rtol=1e-9, atol=1e-12 * d.spectrum.max())

    @pytest.mark.parametrize("shift", [(3, 0), (0, -6), (7, 7)])
    def test_translation_invariance(self, map_at, shift):
        g = map_at(Pose2(10, 5, 0.3)).grid
        d = make_descriptor(g)
        moved = make_descriptor(np.roll(g, shift, axis=(0, 1)))
        assert np.linalg.norm(moved.spectrum - d.spectrum) / d.norm < 0.05

    def test_rotation_90(self, map_at):
        g = map_at(Pose2(-20, 15, 1.0)).grid
        assert match_score(make_descriptor(g), make_descriptor(np.rot90(g).copy())) > 0.95

    def test_metadata_carried(self):
        d = make_descriptor(blob_map(2), keyframe_index=3, pose_at_creation=Pose2(1, 2, 0), distance_travelled=7.0)
        assert (d.keyframe_index, d.pose_at_creation, d.distance_travelled) == (3, Pose2(1, 2, 0), 7.0)


@pytest.fixture(scope="module")
def descs():
    return [make_descriptor(blob_map(s)) for s in range(4)]


class TestMatchScore:
    def test_self_is_one(self, descs):
        assert match_score(descs[0], descs[0]) == 1.0

    def test_scaled_copy_is_one(self, descs):
        d = descs[0]
        assert match_score(d, type(d)(d.spectrum * 3.7, d.norm * 3.7)) == pytest.approx(1.0, abs=1e-12)

    def test_symmetric(self, descs):
        for a in descs:
            for b in descs:
                assert match_score(a, b) == pytest.approx(match_score(b, a), abs=1e-9)

    def test_bounded(self, descs):
        for a in descs:
            for b in descs:
                assert -1.0 <= match_score(a, b) <= 1.0

    def test_shape_mismatch(self, descs):
        other = make_descriptor(blob_map(0), n_angles=90)
        with pytest.raises(ValueError):
            match_score(descs[0], other)

    def test_circular_shift_of_rows_is_found(self, descs):
        d = descs[1]
        shifted = type(d)(np.roll(d.spectrum, 17, axis=0), d.norm)
        assert match_score(d, shifted) == pytest.approx(1.0, abs=1e-12)


@pytest.fixture(scope="module")
def maps():
    return [blob_map(s) for s in range(5)]


class TestRecognizer:
    def test_search_radius(self):
        assert search_radius(100.0) == 20.0
        assert search_radius(1000.0) == 20.0
        assert search_radius(3000.0) == pytest.approx(30.0)

    def test_first_keyframe_has_no_candidate(self, maps):
        pr = PlaceRecognizer()
        assert pr.try_keyframe(maps[0], Pose2(), 0.0) is None
        assert len(pr.keyframes) == 1

    def test_revisit_after_long_loop(self, maps):
        pr = PlaceRecognizer()
        pr.try_keyframe(maps[0], Pose2(0, 0, 0), 0.0)
        pr.try_keyframe(maps[1], Pose2(300, 0, 0), 300.0)
        pr.try_keyframe(maps[2], Pose2(5, 5, 0), 900.0)
        # 1000 m later the odometry believes it is 8 m from the start
        cand = pr.try_keyframe(maps[0], Pose2(8, 0, 0.1), 1000.0)
        assert cand is not None
        assert (cand.query_index, cand.match_index) == (3, 0)
        assert cand.raplace_score == pytest.approx(1.0)

    def test_busy_worker_skips(self, maps):
        pr = PlaceRecognizer()
        pr.try_keyframe(maps[0], Pose2(), 0.0)
        assert pr.try_keyframe(maps[0], Pose2(), 500.0, worker_busy=True) is None
        assert len(pr.keyframes) == 1
        assert pr.detections == 0

    def test_recent_travel_excluded(self, maps):
        pr = PlaceRecognizer(d_min=50.0)
        pr.try_keyframe(maps[0], Pose2(), 0.0)
        assert pr.try_keyframe(maps[0], Pose2(1, 0, 0), 49.0) is None

    def test_no_threshold_on_score(self, maps):
        pr = PlaceRecognizer()
        pr.try_keyframe(maps[0], Pose2(), 0.0)
        cand = pr.try_keyframe(maps[3], Pose2(1, 0, 0), 400.0)
        assert cand is not None and cand.match_index == 0

    def test_ties_go_to_oldest(self, maps):
        pr = PlaceRecognizer()
        pr.try_keyframe(maps[0], Pose2(0, 0, 0), 0.0)
        pr.try_keyframe(maps[0], Pose2(2, 0, 0), 100.0)
        cand = pr.try_keyframe(maps[0], Pose2(1, 0, 0), 300.0)
        assert cand.match_index == 0

    def test_admissibility_monotone_in_drift_rate(self, descs):
        rng = np.random.default_rng(4)
        d = descs[0]
        small, large = PlaceRecognizer(drift_rate=0.005), PlaceRecognizer(drift_rate=0.05)
        for k in range(40):
            pose = Pose2(rng.uniform(-60, 60), rng.uniform(-60, 60), 0.0)
            for pr in (small, large):
                pr.keyframes.append(PlaceDescriptor(d.spectrum, d.norm, k, pose, 60.0 * k))
        for a, b in zip(small.keyframes, large.keyframes):
            assert set(small.admissible(a)) <= set(large.admissible(b))
        assert sum(map(len, map(large.admissible, large.keyframes))) > sum(map(len, map(small.admissible, small.keyframes)))

    def test_dump_csv(self, maps, tmp_path):
        pr = PlaceRecognizer()
        pr.try_keyframe(maps[0], Pose2(1, 2, 0.5), 0.0, frame_index=4, stamp=1.0)
        pr.dump_csv(tmp_path / "kf.csv")
        rows = list(csv.DictReader(open(tmp_path / "kf.csv")))
        assert rows[0]["frame"] == "4" and float(rows[0]["theta"]) == 0.5


class TestWorker:
    def test_results_match_synchronous(self):
        maps = [blob_map(s) for s in range(3)]
        poses = [(Pose2(0, 0, 0), 0.0), (Pose2(200, 0, 0), 200.0), (Pose2(3, 0, 0), 400.0)]
        sync = PlaceRecognizer()
        expected = [sync.try_keyframe(m, p, d, False, k) for k, (m, (p, d)) in enumerate(zip(maps, poses))]
        worker = PlaceRecognitionWorker(PlaceRecognizer())
        got = []
        for k, (m, (p, d)) in enumerate(zip(maps, poses)):
            assert worker.submit(m, p, d, k, 0.0)
            got += worker.drain()
        worker.close()
        assert got == [e for e in expected if e is not None]

    def test_submit_while_busy_is_skipped(self):
        release = threading.Event()
        pr = PlaceRecognizer()
        original = pr.try_keyframe

        def slow(*args, **kwargs):
            release.wait(5.0)
            return original(*args, **kwargs)

        pr.try_keyframe = slow
        worker = PlaceRecognitionWorker(pr)
        m = blob_map(0)
        assert worker.submit(m, Pose2(), 0.0, 0, 0.0)
        assert worker.busy
        assert not worker.submit(m, Pose2(), 1.0, 1, 0.25)
        release.set()
        worker.drain()
        worker.close()
        assert len(pr.keyframes) == 1

    def test_worker_errors_surface(self):
        worker = PlaceRecognitionWorker(PlaceRecognizer())
        worker.submit(create_map(np.zeros((129, 129)), Pose2(), 1.0), Pose2(), 0.0, 0, 0.0)
        with pytest.raises(ValueError):
            worker.drain()
        worker.close()
