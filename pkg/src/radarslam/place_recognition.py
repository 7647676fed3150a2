"""Radon-spectrum place descriptors and keyframe loop-candidate search.

A descriptor is the magnitude of the FFT, along the offset axis, of the
map's sinogram. The magnitude discards the phase a translation introduces;
a rotation of the map becomes a circular shift of the sinogram rows, which
``match_score`` absorbs by maximising over shifts.

Matching correlates descriptors after removing, per frequency bin, the mean
over all angles. That mean is unchanged by circular row shifts, so the
invariances hold, and it removes the large common component (the overall
radial mass profile) that otherwise makes every pair of maps look alike.
"""

from __future__ import annotations

import csv
import math
import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .local_map import LocalMap
from .se2 import Pose2


@dataclass
class PlaceDescriptor:
    spectrum: np.ndarray  # (n_angles, n_freqs), >= 0
    norm: float
    keyframe_index: int = -1
    pose_at_creation: Pose2 = Pose2()
    distance_travelled: float = 0.0
    frame_index: int = -1
    stamp: float = 0.0

    def __post_init__(self):
        self.spectrum = np.asarray(self.spectrum, dtype=float)
        self._centered = self.spectrum - self.spectrum.mean(axis=0)
        self._centered_norm = float(np.linalg.norm(self._centered))
        self._centered_fft = np.fft.rfft(self._centered, axis=0)


@dataclass(frozen=True)
class LoopCandidate:
    query_index: int  # newer keyframe
    match_index: int  # older keyframe
    raplace_score: float
    query_frame: int = -1
    match_frame: int = -1


def radon_sinogram(image: np.ndarray, n_angles: int = 180) -> np.ndarray:
    """Line integrals of ``image`` for angles ``pi * k / n_angles``.

    Row ``k`` holds projections onto the direction at angle ``theta_k``,
    sampled at unit-pixel offsets about the image centre; each line is
    integrated with unit-pixel steps using bilinear interpolation.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError("radon transform expects a square image")
    n = image.shape[0]
    c = (n - 1) / 2.0
    half = int(math.ceil(c * math.sqrt(2.0)))
    offs = np.arange(-half, half + 1, dtype=float)
    o, t = np.meshgrid(offs, offs, indexing="ij")  # o: offset, t: along the line
    out = np.empty((n_angles, len(offs)))
    for k in range(n_angles):
        th = math.pi * k / n_angles
        ct, st = math.cos(th), math.sin(th)
        x = o * ct - t * st + c
        y = o * st + t * ct + c
        vals = ndimage.map_coordinates(image, [y, x], order=1, mode="grid-constant", cval=0.0)
        out[k] = vals.sum(axis=1)
    return out


def _descriptor_image(grid: np.ndarray, size: int, smoothing: float = 0.0) -> np.ndarray:
    img = np.asarray(grid, dtype=float)
    if size and img.shape[0] != size:
        img = cv2.resize(img, (size, size), interpolation=cv2.INTER_AREA)
    n = img.shape[0]
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n]
    img = np.where((xx - c) ** 2 + (yy - c) ** 2 <= c * c, img, 0.0).astype(float)
    if smoothing > 0:
        img = ndimage.gaussian_filter(img, smoothing)
    return img


def make_descriptor(
    local_map: LocalMap | np.ndarray,
    n_angles: int = 180,
    n_freqs: int = 64,
    image_size: int = 129,
    smoothing: float = 1.0,
    **meta,
) -> PlaceDescriptor:
    """Rotation- and translation-invariant signature of a local map.

    The map is area-downsampled to ``image_size`` pixels and masked to its
    inscribed disk before the Radon transform, so the descriptor only
    depends on content a rotation keeps in view. ``image_size=0`` keeps the
    native size. A Gaussian blur of ``smoothing`` pixels makes the high
    frequency bins insensitive to the sub-pixel phase of a translation.
    """
    grid = local_map.grid if isinstance(local_map, LocalMap) else np.asarray(local_map, dtype=float)
    if not np.any(grid > 0):
        raise ValueError("cannot describe an all-zero map")
    img = _descriptor_image(grid, image_size, smoothing)
    sino = radon_sinogram(img, n_angles)
    spec = np.abs(np.fft.rfft(sino, axis=1))[:, 1 : n_freqs + 1]
    if spec.shape[1] < n_freqs:
        raise ValueError("image too small for the requested number of frequencies")
    return PlaceDescriptor(spec, float(np.linalg.norm(spec)), **meta)


def _circular_correlation(fa: np.ndarray, fb: np.ndarray, n: int) -> np.ndarray:
    """Correlation for every circular row shift from row-axis real FFTs."""
    return np.fft.irfft(fa * np.conj(fb), n=n, axis=0).sum(axis=1)


def match_score(a: PlaceDescriptor, b: PlaceDescriptor) -> float:
    """Best normalised correlation over circular shifts of the angle axis.

    Each frequency column is centred on its mean over angles first. Maps
    whose spectra have no angular variation at all (e.g. rotationally
    symmetric scenes) fall back to the uncentred correlation.
    """
    if a.spectrum.shape != b.spectrum.shape:
        raise ValueError(f"descriptor shapes differ: {a.spectrum.shape} vs {b.spectrum.shape}")
    if a.norm == 0.0 or b.norm == 0.0:
        return 0.0
    if a.spectrum is b.spectrum or np.array_equal(a.spectrum, b.spectrum):
        return 1.0
    n = a.spectrum.shape[0]
    if a._centered_norm > 1e-12 * a.norm and b._centered_norm > 1e-12 * b.norm:
        corr = _circular_correlation(a._centered_fft, b._centered_fft, n)
        denom = a._centered_norm * b._centered_norm
    else:
        fa = np.fft.rfft(a.spectrum, axis=0)
        fb = np.fft.rfft(b.spectrum, axis=0)
        corr = _circular_correlation(fa, fb, n)
        denom = a.norm * b.norm
    return float(np.clip(corr.max() / denom, -1.0, 1.0))


def search_radius(travel_gap: float, drift_rate: float = 0.01, r_min: float = 20.0) -> float:
    return max(r_min, drift_rate * abs(travel_gap))


class PlaceRecognizer:
    """Keyframe database with radius-limited argmax candidate search.

    No score threshold is applied: the best admissible past keyframe is
    always proposed and left to registration to validate.
    """

    def __init__(
        self,
        n_angles: int = 180,
        n_freqs: int = 64,
        image_size: int = 129,
        drift_rate: float = 0.01,
        r_min: float = 20.0,
        d_min: float = 50.0,
        smoothing: float = 1.0,
    ):
        self.n_angles = n_angles
        self.n_freqs = n_freqs
        self.image_size = image_size
        self.smoothing = smoothing
        self.drift_rate = drift_rate
        self.r_min = r_min
        self.d_min = d_min
        self.keyframes: list[PlaceDescriptor] = []
        self.detections = 0

    def admissible(self, query: PlaceDescriptor) -> list[int]:
        out = []
        qp = query.pose_at_creation
        for j, kf in enumerate(self.keyframes):
            if kf is query:
                continue
            gap = query.distance_travelled - kf.distance_travelled
            if gap < self.d_min:
                continue
            p = kf.pose_at_creation
            if math.hypot(qp.x - p.x, qp.y - p.y) < search_radius(gap, self.drift_rate, self.r_min):
                out.append(j)
        return out

    def add_keyframe(
        self, local_map: LocalMap, odom_pose: Pose2, distance_travelled: float, frame_index: int = -1, stamp: float = 0.0
    ) -> PlaceDescriptor:
        desc = make_descriptor(
            local_map,
            self.n_angles,
            self.n_freqs,
            self.image_size,
            self.smoothing,
            keyframe_index=len(self.keyframes),
            pose_at_creation=odom_pose,
            distance_travelled=distance_travelled,
            frame_index=frame_index,
            stamp=stamp,
        )
        self.keyframes.append(desc)
        return desc

    def try_keyframe(
        self,
        local_map: LocalMap,
        odom_pose: Pose2,
        distance_travelled: float,
        worker_busy: bool = False,
        frame_index: int = -1,
        stamp: float = 0.0,
    ) -> LoopCandidate | None:
        if worker_busy:
            return None
        desc = self.add_keyframe(local_map, odom_pose, distance_travelled, frame_index, stamp)
        cands = self.admissible(desc)
        if not cands:
            return None
        scores = [match_score(desc, self.keyframes[j]) for j in cands]
        best = int(np.argmax(scores))  # first max = oldest keyframe
        self.detections += 1
        j = cands[best]
        return LoopCandidate(desc.keyframe_index, j, scores[best], frame_index, self.keyframes[j].frame_index)

    def dump_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "frame", "stamp", "x", "y", "theta", "distance_travelled"])
            for kf in self.keyframes:
                p = kf.pose_at_creation
                w.writerow([kf.keyframe_index, kf.frame_index, kf.stamp, p.x, p.y, p.theta, kf.distance_travelled])


class PlaceRecognitionWorker:
    """Runs a :class:`PlaceRecognizer` on a background thread.

    The mailbox holds a single request: ``submit`` returns ``False`` without
    keyframing the map when the worker is still busy with the previous one.
    """

    def __init__(self, recognizer: PlaceRecognizer):
        self.recognizer = recognizer
        self._mailbox: queue.Queue = queue.Queue(maxsize=1)
        self._results: queue.Queue = queue.Queue()
        self._idle = threading.Event()
        self._idle.set()
        self._thread = threading.Thread(target=self._run, name="place-recognition", daemon=True)
        self._thread.start()

    @property
    def busy(self) -> bool:
        return not self._idle.is_set()

    def submit(self, local_map: LocalMap, odom_pose: Pose2, distance_travelled: float, frame_index: int, stamp: float) -> bool:
        if self.busy:
            return False
        self._idle.clear()
        self._mailbox.put((local_map, odom_pose, distance_travelled, frame_index, stamp))
        return True

    def _run(self):
        while True:
            item = self._mailbox.get()
            if item is None:
                self._idle.set()
                return
            try:
                local_map, pose, dist, frame, stamp = item
                cand = self.recognizer.try_keyframe(local_map, pose, dist, False, frame, stamp)
                self._results.put(cand)
            except Exception as exc:  # surfaced to the caller through poll()
                self._results.put(exc)
            finally:
                self._idle.set()

    def poll(self) -> list[LoopCandidate]:
        out = []
        while True:
            try:
                item = self._results.get_nowait()
            except queue.Empty:
                return out
            if isinstance(item, Exception):
                raise item
            if item is not None:
                out.append(item)

    def drain(self, timeout: float | None = None) -> list[LoopCandidate]:
        """Wait for the current request to finish and return pending results."""
        self._idle.wait(timeout)
        return self.poll()

    def close(self):
        self._idle.wait()
        self._mailbox.put(None)
        self._thread.join()
