"""Independent reference computations shared by the unit and acceptance tests."""

import math

import numpy as np

from radarslam.direct_reg import CorrelationObjective, correlation, correlation_gradient
from radarslam.local_map import create_map
from radarslam.pose_graph import LoopFactor, OdometryFactor, PoseGraph
from radarslam.se2 import Pose2, between, compose, transform_point

FD_STEPS = (1e-4, 1e-4, 1e-5)  # m, m, rad


def smooth_map(seed, size=61, res=0.5):
    from scipy.ndimage import gaussian_filter

    g = gaussian_filter(np.random.default_rng(seed).uniform(0, 1, (size, size)), 2.0)
    return create_map(g * 10, Pose2(), res)


def sparse_map(seed, like, n=60):
    rng = np.random.default_rng(seed)
    g = np.zeros_like(like.grid)
    g.flat[rng.choice(g.size, n, replace=False)] = rng.uniform(0.5, 1.0, n)
    return create_map(g, Pose2(), like.resolution)


def correlation_fd_errors(obj: CorrelationObjective, poses, steps=FD_STEPS):
    """Relative error of the analytic gradient against central differences.

    Samples whose difference stencil moves any active pixel into another
    bilinear cell are skipped (the objective is only piecewise smooth), so
    the returned list can be shorter than ``poses``.
    """
    res = obj.moving.resolution

    def cells(T):
        return np.floor(transform_point(T, obj.points) / res).astype(int)

    errors = []
    for T in poses:
        base = cells(T)
        fd, stable = np.zeros(3), True
        for k, h in enumerate(steps):
            d = np.zeros(3)
            d[k] = h
            plus, minus = Pose2(*(T.as_array() + d)), Pose2(*(T.as_array() - d))
            stable &= np.array_equal(cells(plus), base) and np.array_equal(cells(minus), base)
            fd[k] = (correlation(obj, plus) - correlation(obj, minus)) / (2 * h)
        if stable:
            an = correlation_gradient(obj, T).as_array()
            errors.append(float(np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-300)))
    return errors


def jacobian_fd(fun, x, h=1e-6):
    """Central-difference Jacobian of ``fun`` at ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fun(x))
    J = np.zeros((len(f0), len(x)))
    for k in range(len(x)):
        d = np.zeros_like(x)
        d[k] = h
        J[:, k] = (np.atleast_1d(fun(x + d)) - np.atleast_1d(fun(x - d))) / (2 * h)
    return J


def correspondences(T, n_true, n_out, seed, scale=1.0, res=0.5, center=250.0):
    """Pixel pairs ``(fixed, moving)`` related by ``T`` (meters), plus uniform outliers."""
    rng = np.random.default_rng(seed)
    pf = rng.uniform(-100, 100, (n_true, 2))  # meters in the fixed frame
    pm = scale * transform_point(T, pf) + (1 - scale) * np.array([T.x, T.y])
    src = np.vstack([pf / res + center, rng.uniform(0, 2 * center, (n_out, 2))])
    dst = np.vstack([pm / res + center, rng.uniform(0, 2 * center, (n_out, 2))])
    perm = rng.permutation(len(src))
    return src[perm], dst[perm]


POSE_INFO = np.diag([1 / 0.1**2, 1 / 0.05**2, 1 / 0.005**2])


def circle_truth(n=40, radius=30.0):
    ang = np.linspace(0, 2 * math.pi, n, endpoint=False)
    return [Pose2(radius * math.cos(a), radius * math.sin(a), a + math.pi / 2) for a in ang]


def noisy_graph(truth, rng, loops=(), info=POSE_INFO, sigma=(0.1, 0.05, 0.005)):
    """Odometry chain with Gaussian measurement noise plus exact loop factors."""
    g = PoseGraph(len(truth))
    for k in range(len(truth) - 1):
        z = between(truth[k], truth[k + 1])
        z = compose(z, Pose2(*(rng.standard_normal(3) * sigma)))
        g.add_odometry(OdometryFactor(k, z, info, 0.25))
    for i, j in loops:
        g.add_loop(LoopFactor(i, j, between(truth[i], truth[j]), info * 2))
    return g
