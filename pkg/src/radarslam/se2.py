"""SE(2) rigid transforms in x-y-theta form.

Poses are immutable values; ``theta`` is always wrapped to (-pi, pi].
The log map used throughout the package is the plain coordinate reading
``(x, y, theta)``, not the Lie-algebra logarithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np


def wrap_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    if np.ndim(a) == 0:
        a = float(a)
        if -math.pi < a <= math.pi:
            return a
        w = math.fmod(a + math.pi, 2.0 * math.pi)
        if w <= 0.0:
            w += 2.0 * math.pi
        return w - math.pi
    a = np.asarray(a, dtype=float)
    w = np.fmod(a + np.pi, 2.0 * np.pi)
    w = np.where(w <= 0.0, w + 2.0 * np.pi, w) - np.pi
    return np.where((a > -np.pi) & (a <= np.pi), a, w)


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True, slots=True)
class Twist2:
    """Vector form (dx, dy, dtheta) of a pose or residual."""

    dx: float
    dy: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


@dataclass(frozen=True, slots=True)
class Pose2:
    """Planar rigid transform.

    Attributes
    ----------
    x, y:
        Translation in meters.
    theta:
        Heading in radians, wrapped to (-pi, pi] on construction.
    """

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, v: Iterable[float]) -> "Pose2":
        x, y, t = (float(a) for a in v)
        return cls(x, y, t)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose2":
        return cls(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def as_matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def rotation(self) -> np.ndarray:
        return rot2(self.theta)

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return compose(self, other)

    def inverse(self) -> "Pose2":
        return inverse(self)


def compose(a: Pose2, b: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.theta + b.theta,
    )


def inverse(a: Pose2) -> Pose2:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(-c * a.x - s * a.y, s * a.x - c * a.y, -a.theta)


def between(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose ``a^-1 b``."""
    return compose(inverse(a), b)


def log_xytheta(a: Pose2) -> Twist2:
    return Twist2(a.x, a.y, a.theta)


def transform_point(a: Pose2, p) -> np.ndarray:
    """Apply ``a`` to a point, or to an (N, 2) array of points."""
    p = np.asarray(p, dtype=float)
    c, s = math.cos(a.theta), math.sin(a.theta)
    if p.ndim == 1:
        return np.array([c * p[0] - s * p[1] + a.x, s * p[0] + c * p[1] + a.y])
    out = np.empty_like(p)
    out[:, 0] = c * p[:, 0] - s * p[:, 1] + a.x
    out[:, 1] = s * p[:, 0] + c * p[:, 1] + a.y
    return out


def chain(start: Pose2, relatives: Iterable[Pose2]) -> list[Pose2]:
    """Compose a start pose with successive relative poses."""
    poses = [start]
    for r in relatives:
        poses.append(compose(poses[-1], r))
    return poses


def poses_to_array(poses: Iterable[Pose2]) -> np.ndarray:
    return np.array([p.as_array() for p in poses]).reshape(-1, 3)


def array_to_poses(arr: np.ndarray) -> list[Pose2]:
    return [Pose2(*row) for row in np.asarray(arr, dtype=float)]
