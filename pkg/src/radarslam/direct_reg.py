"""Direct map-to-map registration by continuous cross-correlation.

The objective sums, over every non-zero pixel ``(x, y)`` of the fixed map,
the fixed intensity times the bilinearly interpolated moving intensity at
``T [x y 1]^T``. ``T`` is therefore the pose of the fixed map expressed in
the moving map's frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .local_map import LocalMap
from .se2 import Pose2, Twist2, transform_point


class CorrelationObjective:
    """Correlation of ``fixed`` against ``moving`` under a rigid transform.

    Only fixed pixels with intensity above ``min_intensity`` (strictly
    positive by default) take part, so evaluation cost scales with the
    number of active pixels rather than the grid area.
    """

    def __init__(self, moving: LocalMap, fixed: LocalMap, min_intensity: float = 0.0):
        self.moving = moving
        self.fixed = fixed
        mask = fixed.grid > min_intensity
        pts = fixed.pixel_points()[mask]
        self.points = np.ascontiguousarray(pts)
        self.weights = fixed.grid[mask].astype(float)
        self.energy = float(np.dot(self.weights, self.weights))
        self._sampler = moving.sampler
        r2 = np.average(np.sum(pts**2, axis=1), weights=self.weights) if len(pts) else 1.0
        self.radius = max(math.sqrt(r2), fixed.resolution)

    @property
    def active_pixels(self) -> np.ndarray:
        """(n, 3) array of ``x, y, intensity``."""
        return np.column_stack([self.points, self.weights])

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True)
class RegistrationResult:
    transform: Pose2
    score_g: float
    score_s: float
    iterations: int
    converged: bool


def correlation(obj: CorrelationObjective, T: Pose2) -> float:
    if not len(obj):
        return 0.0
    vals = obj._sampler(transform_point(T, obj.points))
    return float(np.dot(vals, obj.weights))


def correlation_gradient(obj: CorrelationObjective, T: Pose2) -> Twist2:
    """Analytic derivative of the correlation w.r.t. ``(x, y, theta)`` of ``T``."""
    g, gr = _value_and_gradient(obj, T)
    return Twist2(*gr)


def _value_and_gradient(obj: CorrelationObjective, T: Pose2) -> tuple[float, np.ndarray]:
    if not len(obj):
        return 0.0, np.zeros(3)
    q = transform_point(T, obj.points)
    val, gx, gy = obj._sampler.value_and_gradient(q)
    w = obj.weights
    rx, ry = q[:, 0] - T.x, q[:, 1] - T.y
    grad = np.array([np.dot(w, gx), np.dot(w, gy), np.dot(w, gx * -ry + gy * rx)])
    return float(np.dot(w, val)), grad


def scaled_score(obj: CorrelationObjective, T: Pose2) -> float:
    """Correlation divided by the fixed map's self-energy (an overlap proxy)."""
    if obj.energy <= 0.0:
        raise ValueError("scaled score undefined for an all-zero fixed map")
    return correlation(obj, T) / obj.energy


def refine(
    obj: CorrelationObjective,
    init: Pose2,
    initial_step: float = 0.25,
    max_step: float = 1.0,
    max_iters: int = 300,
    tolerance: float = 1e-4,
) -> RegistrationResult:
    """Gradient ascent with step adaptation.

    Steps follow the gradient in a metric where one radian weighs as much as
    the RMS radius of the active pixels, so rotations and translations move
    points by comparable amounts. A step is accepted only if the correlation
    increases (the step then grows by 1.5x); otherwise it is halved.
    ``tolerance`` and the step sizes are in meters of point displacement.
    """
    if not all(math.isfinite(v) for v in init.as_array()):
        raise ValueError("initial transform must be finite")
    x = init.as_array()
    g, grad = _value_and_gradient(obj, init)
    scale = np.array([1.0, 1.0, 1.0 / obj.radius])
    step = initial_step
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        d = scale * grad  # displacement-space gradient
        dn = np.linalg.norm(d)
        if dn == 0.0:
            converged = True
            break
        cand = x + (step / dn) * d * scale
        cand_pose = Pose2(*cand)
        g_new, grad_new = _value_and_gradient(obj, cand_pose)
        if g_new > g:
            x, g, grad = cand_pose.as_array(), g_new, grad_new
            step = min(step * 1.5, max_step)
        else:
            step *= 0.5
        if step < tolerance:
            converged = True
            break
    T = Pose2(*x)
    s = g / obj.energy if obj.energy > 0 else 0.0
    return RegistrationResult(T, g, s, it, converged)


def lattice(center: Pose2, half_widths, steps) -> np.ndarray:
    axes = []
    for c, h, n in zip(center.as_array(), half_widths, steps):
        if int(n) < 1:
            raise ValueError("grid search needs at least one step per axis")
        axes.append(c + (np.linspace(-h, h, int(n)) if n > 1 and h > 0 else np.zeros(1)))
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def grid_search(
    obj: CorrelationObjective,
    center: Pose2,
    half_widths=(2.0, 2.0, math.radians(3.0)),
    steps=(9, 9, 7),
) -> Pose2:
    """Exhaustive correlation maximisation over a lattice centred on ``center``.

    Ties go to the candidate closest to the centre.
    """
    cands = lattice(center, half_widths, steps)
    if not len(obj):
        return center
    scores = np.empty(len(cands))
    for theta in np.unique(cands[:, 2]):
        idx = np.nonzero(cands[:, 2] == theta)[0]
        rp = transform_point(Pose2(0.0, 0.0, theta), obj.points)
        for k in idx:
            scores[k] = np.dot(obj._sampler(rp + cands[k, :2]), obj.weights)
    best = scores.max()
    tied = np.nonzero(scores >= best - 1e-12 * max(abs(best), 1.0))[0]
    off = cands[tied] - center.as_array()
    dist = off[:, 0] ** 2 + off[:, 1] ** 2 + (obj.radius * off[:, 2]) ** 2
    return Pose2(*cands[tied[np.argmin(dist)]])


def register(
    moving: LocalMap,
    fixed: LocalMap,
    init: Pose2,
    half_widths=(2.0, 2.0, math.radians(3.0)),
    steps=(9, 9, 7),
    min_intensity: float = 0.0,
    **refine_opts,
) -> RegistrationResult:
    """Grid search around ``init`` followed by gradient refinement."""
    obj = CorrelationObjective(moving, fixed, min_intensity)
    start = grid_search(obj, init, half_widths, steps)
    return refine(obj, start, **refine_opts)
