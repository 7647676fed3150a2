"""Batch SE(2) pose-graph optimisation with optional gyro-bias states.

Nodes are odometry frames. Odometry factors link consecutive nodes and, when
bias states are present, correct their measured rotation by the difference
between the node's bias and the bias the odometry integrated with. Loop
factors are robustified with a Cauchy loss; bias factors tie consecutive
biases together as a random walk.

The solver is iteratively reweighted Gauss-Newton with Marquardt damping on
a dense normal matrix, with node 0 held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .se2 import Pose2, Twist2, array_to_poses, poses_to_array, wrap_angle


# Sign of the bias-induced rotation applied to an odometry measurement.
# -1 reproduces the measurement correction as it is commonly printed
# (rotation block [cos, sin; -sin, cos]); +1 is the opposite convention.
PRINTED_BIAS_SIGN = -1


@dataclass
class OdometryFactor:
    i: int  # links i -> i + 1
    measurement: Pose2
    information: np.ndarray
    dt: float = 0.0
    dro_bias: float = 0.0  # bias used when the measurement was integrated

    def __post_init__(self):
        self.information = np.asarray(self.information, dtype=float).reshape(3, 3)

    @property
    def j(self) -> int:
        return self.i + 1


@dataclass
class LoopFactor:
    i: int
    j: int
    measurement: Pose2  # pose of node j in node i's frame
    information: np.ndarray
    robust: bool = True

    def __post_init__(self):
        if abs(self.i - self.j) <= 1:
            raise ValueError("loop factors must join non-consecutive nodes")
        self.information = np.asarray(self.information, dtype=float).reshape(3, 3)


@dataclass
class BiasFactor:
    i: int  # links b_i and b_{i+1}
    information: float

    def __post_init__(self):
        if not self.information > 0:
            raise ValueError("bias random-walk information must be positive")

    @property
    def j(self) -> int:
        return self.i + 1


@dataclass
class GraphState:
    poses: np.ndarray  # (N, 3)
    biases: np.ndarray | None = None  # (N,) rad/s, gyro mode only

    def __post_init__(self):
        if len(self.poses) and isinstance(self.poses[0], Pose2):
            self.poses = poses_to_array(self.poses)
        self.poses = np.array(self.poses, dtype=float).reshape(-1, 3)
        if len(self.poses) < 1:
            raise ValueError("a graph state needs at least one pose")
        if self.biases is not None:
            self.biases = np.array(self.biases, dtype=float).reshape(-1)
            if len(self.biases) != len(self.poses):
                raise ValueError("one bias per pose required")

    def __len__(self):
        return len(self.poses)

    @property
    def pose_list(self) -> list[Pose2]:
        return array_to_poses(self.poses)

    def copy(self) -> "GraphState":
        return GraphState(self.poses.copy(), None if self.biases is None else self.biases.copy())

    @property
    def dimension(self) -> int:
        return 3 * len(self) + (0 if self.biases is None else len(self))


# ---------------------------------------------------------------------------
# residuals and Jacobians


def _relative_batch(X, b, i, j, meas, dt, bref, sign):
    """Residuals (m, 3) and Jacobians w.r.t. pose i, pose j and bias i."""
    xi, xj = X[i], X[j]
    if b is None:
        phi = np.zeros(len(i))
    else:
        phi = (b[i] - bref) * dt
    th_m = meas[:, 2] + sign * phi
    ci, si = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    d = xj[:, :2] - xi[:, :2]
    # R_i^T d
    u0 = ci * d[:, 0] + si * d[:, 1]
    u1 = -si * d[:, 0] + ci * d[:, 1]
    v = np.column_stack([u0 - meas[:, 0], u1 - meas[:, 1]])
    cm, sm = np.cos(th_m), np.sin(th_m)
    r = np.empty((len(i), 3))
    r[:, 0] = cm * v[:, 0] + sm * v[:, 1]
    r[:, 1] = -sm * v[:, 0] + cm * v[:, 1]
    r[:, 2] = wrap_angle(xj[:, 2] - xi[:, 2] - th_m)

    RmT = np.empty((len(i), 2, 2))
    RmT[:, 0, 0], RmT[:, 0, 1], RmT[:, 1, 0], RmT[:, 1, 1] = cm, sm, -sm, cm
    RiT = np.empty((len(i), 2, 2))
    RiT[:, 0, 0], RiT[:, 0, 1], RiT[:, 1, 0], RiT[:, 1, 1] = ci, si, -si, ci
    A = RmT @ RiT  # d r_t / d t_j
    Jj = np.zeros((len(i), 3, 3))
    Jj[:, :2, :2] = A
    Jj[:, 2, 2] = 1.0
    Ji = np.zeros((len(i), 3, 3))
    Ji[:, :2, :2] = -A
    # d(R_i^T d)/d theta_i = -J R_i^T d
    du = np.column_stack([u1, -u0])
    Ji[:, :2, 2] = np.einsum("nab,nb->na", RmT, du)
    Ji[:, 2, 2] = -1.0
    # d r / d theta_m, times d theta_m / d b_i = sign * dt
    Jb = np.zeros((len(i), 3))
    if b is not None:
        Jb[:, 0] = r[:, 1] * sign * dt
        Jb[:, 1] = -r[:, 0] * sign * dt
        Jb[:, 2] = -sign * dt
    return r, Ji, Jj, Jb


def _as_state_arrays(state: GraphState):
    return state.poses, state.biases


def relative_residual(
    state: GraphState, factor: OdometryFactor | LoopFactor, bias_sign: int = PRINTED_BIAS_SIGN
) -> Twist2:
    X, b = _as_state_arrays(state)
    r = _single(X, b, factor, bias_sign)[0]
    return Twist2(*r[0])


def _single(X, b, factor, bias_sign):
    meas = factor.measurement.as_array()[None, :]
    if isinstance(factor, OdometryFactor):
        return _relative_batch(
            X, b, np.array([factor.i]), np.array([factor.j]), meas,
            np.array([factor.dt]), np.array([factor.dro_bias]), bias_sign,
        )
    return _relative_batch(X, None, np.array([factor.i]), np.array([factor.j]), meas, np.zeros(1), np.zeros(1), 0)


def bias_residual(state: GraphState, factor: BiasFactor) -> float:
    if state.biases is None:
        raise ValueError("state has no bias variables")
    return float(state.biases[factor.i] - state.biases[factor.j])


def jacobians(state: GraphState, factor, bias_sign: int = PRINTED_BIAS_SIGN) -> dict[str, np.ndarray]:
    """Analytic residual Jacobian blocks keyed ``pose_i``, ``pose_j``, ``bias_i`` (and ``bias_j``)."""
    if isinstance(factor, BiasFactor):
        return {"bias_i": np.array([1.0]), "bias_j": np.array([-1.0])}
    X, b = _as_state_arrays(state)
    _, Ji, Jj, Jb = _single(X, b, factor, bias_sign)
    return {"pose_i": Ji[0], "pose_j": Jj[0], "bias_i": Jb[0]}


def cauchy_weight(whitened_sq: float | np.ndarray, c: float) -> float | np.ndarray:
    """IRLS weight ``1 / (1 + r^2 / c^2)`` for a squared whitened residual."""
    if not c > 0:
        raise ValueError("Cauchy scale must be positive")
    return 1.0 / (1.0 + np.asarray(whitened_sq) / (c * c)) if np.ndim(whitened_sq) else 1.0 / (1.0 + whitened_sq / (c * c))


def cauchy_cost(whitened_sq, c: float):
    return 0.5 * c * c * np.log1p(np.asarray(whitened_sq) / (c * c))


# ---------------------------------------------------------------------------
# graph container


@dataclass
class SolveReport:
    iterations: list[int] = field(default_factory=list)  # per pass
    costs: list[list[float]] = field(default_factory=list)  # accepted-step costs per pass
    converged: bool = True


@dataclass
class PoseGraph:
    n_nodes: int
    use_bias: bool = False
    bias_sign: int = PRINTED_BIAS_SIGN
    odometry: list[OdometryFactor] = field(default_factory=list)
    loops: list[LoopFactor] = field(default_factory=list)
    bias_factors: list[BiasFactor] = field(default_factory=list)
    bias_prior: tuple[float, float] | None = None  # (mean, information) on b_0

    def add_node(self) -> int:
        self.n_nodes += 1
        return self.n_nodes - 1

    def add_odometry(self, factor: OdometryFactor) -> None:
        if factor.dt < 0:
            raise ValueError("dt must be non-negative")
        if factor.j >= self.n_nodes:
            raise IndexError("odometry factor references a missing node")
        self.odometry.append(factor)

    def add_loop(self, factor: LoopFactor) -> None:
        if max(factor.i, factor.j) >= self.n_nodes or min(factor.i, factor.j) < 0:
            raise IndexError("loop factor references a missing node")
        self.loops.append(factor)

    def add_bias_factor(self, factor: BiasFactor) -> None:
        if not self.use_bias:
            raise ValueError("graph has no bias states")
        self.bias_factors.append(factor)

    def check_connected(self) -> None:
        linked = np.zeros(self.n_nodes, bool)
        linked[0] = True
        for f in self.odometry:
            linked[f.j] = True
        if not linked.all():
            raise ValueError(f"graph is disconnected at node {int(np.argmin(linked))}")

    # -- evaluation ------------------------------------------------------
    def _packed(self):
        if not hasattr(self, "_cache") or self._cache[0] != (len(self.odometry), len(self.loops)):
            o, l = self.odometry, self.loops
            odo = (
                np.array([f.i for f in o], dtype=np.intp),
                np.array([f.j for f in o], dtype=np.intp),
                np.array([f.measurement.as_array() for f in o]).reshape(-1, 3),
                np.array([f.information for f in o]).reshape(-1, 3, 3),
                np.array([f.dt for f in o], dtype=float),
                np.array([f.dro_bias for f in o], dtype=float),
            )
            lp = (
                np.array([f.i for f in l], dtype=np.intp),
                np.array([f.j for f in l], dtype=np.intp),
                np.array([f.measurement.as_array() for f in l]).reshape(-1, 3),
                np.array([f.information for f in l]).reshape(-1, 3, 3),
                np.array([f.robust for f in l], dtype=bool),
            )
            self._cache = ((len(o), len(l)), odo, lp)
        return self._cache[1], self._cache[2]

    def _terms(self, state: GraphState):
        X, b = state.poses, (state.biases if self.use_bias else None)
        (oi, oj, om, oinf, odt, obr), (li, lj, lm, linf, lrob) = self._packed()
        odo = _relative_batch(X, b, oi, oj, om, odt, obr, self.bias_sign) if len(oi) else None
        lp = _relative_batch(X, None, li, lj, lm, np.zeros(len(li)), np.zeros(len(li)), 0) if len(li) else None
        return odo, lp

    def cost(self, state: GraphState, c: float | None = None) -> float:
        """Total objective; loop terms use the Cauchy loss when ``c`` is given."""
        (_, _, _, oinf, _, _), (_, _, _, linf, lrob) = self._packed()
        odo, lp = self._terms(state)
        total = 0.0
        if odo is not None:
            total += 0.5 * float(np.einsum("na,nab,nb->", odo[0], oinf, odo[0]))
        if lp is not None:
            s = np.einsum("na,nab,nb->n", lp[0], linf, lp[0])
            if c is None:
                total += 0.5 * float(s.sum())
            else:
                total += float(np.where(lrob, cauchy_cost(s, c), 0.5 * s).sum())
        if self.use_bias:
            bb = state.biases
            for f in self.bias_factors:
                total += 0.5 * f.information * (bb[f.i] - bb[f.j]) ** 2
            if self.bias_prior is not None:
                total += 0.5 * self.bias_prior[1] * (bb[0] - self.bias_prior[0]) ** 2
        return total

    def _normal_equations(self, state: GraphState, c: float | None):
        N = self.n_nodes
        nb = N if self.use_bias else 0
        dim = 3 * N + nb
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        (oi, oj, _, oinf, _, _), (li, lj, _, linf, lrob) = self._packed()
        odo, lp = self._terms(state)

        def add(ii, jj, r, Ji, Jj, Jb, info, w):
            for k in range(len(ii)):
                W = info[k] * w[k]
                cols = [3 * ii[k], 3 * jj[k]]
                blocks = [Ji[k], Jj[k]]
                if Jb is not None and self.use_bias:
                    cols.append(3 * N + ii[k])
                    blocks.append(Jb[k][:, None])
                for a, (ca, Ba) in enumerate(zip(cols, blocks)):
                    BtW = Ba.T @ W
                    g[ca : ca + Ba.shape[1]] += BtW @ r[k]
                    for cb, Bb in zip(cols[a:], blocks[a:]):
                        blk = BtW @ Bb
                        H[ca : ca + Ba.shape[1], cb : cb + Bb.shape[1]] += blk
                        if cb != ca:
                            H[cb : cb + Bb.shape[1], ca : ca + Ba.shape[1]] += blk.T

        if odo is not None:
            add(oi, oj, odo[0], odo[1], odo[2], odo[3], oinf, np.ones(len(oi)))
        if lp is not None:
            s = np.einsum("na,nab,nb->n", lp[0], linf, lp[0])
            w = np.ones(len(li)) if c is None else np.where(lrob, cauchy_weight(s, c), 1.0)
            add(li, lj, lp[0], lp[1], lp[2], None, linf, w)
        if self.use_bias:
            bb = state.biases
            for f in self.bias_factors:
                a, b_ = 3 * N + f.i, 3 * N + f.j
                r = bb[f.i] - bb[f.j]
                H[a, a] += f.information
                H[b_, b_] += f.information
                H[a, b_] -= f.information
                H[b_, a] -= f.information
                g[a] += f.information * r
                g[b_] -= f.information * r
            if self.bias_prior is not None:
                a = 3 * N
                H[a, a] += self.bias_prior[1]
                g[a] += self.bias_prior[1] * (bb[0] - self.bias_prior[0])
        return H, g

    def _retract(self, state: GraphState, delta: np.ndarray) -> GraphState:
        N = self.n_nodes
        full = np.concatenate([np.zeros(3), delta])
        poses = state.poses + full[: 3 * N].reshape(N, 3)
        poses[:, 2] = wrap_angle(poses[:, 2])
        biases = None
        if self.use_bias:
            biases = state.biases + full[3 * N :]
        return GraphState(poses, biases)

    # -- solver ----------------------------------------------------------
    def optimize(
        self,
        init: GraphState,
        schedule: Sequence[float] | None = (10.0, 1.0),
        max_iters: int = 100,
        rel_tol: float = 1e-8,
        initial_damping: float = 1e-4,
        max_escalations: int = 10,
        report: SolveReport | None = None,
    ) -> GraphState:
        """Minimise the objective from ``init``, one pass per Cauchy scale.

        An empty or ``None`` schedule solves the plain least-squares problem.
        """
        if len(init) != self.n_nodes:
            raise ValueError(f"state has {len(init)} poses, graph has {self.n_nodes} nodes")
        self.check_connected()
        state = init.copy()
        if self.use_bias and state.biases is None:
            raise ValueError("bias states required")
        if not self.use_bias:
            state.biases = None
        passes = list(schedule) if schedule else [None]
        report = report if report is not None else SolveReport()
        for c in passes:
            costs = [self.cost(state, c)]
            lam = initial_damping
            it = 0
            for it in range(1, max_iters + 1):
                H, g = self._normal_equations(state, c)
                Hr, gr = H[3:, 3:], g[3:]
                diag = np.diag(Hr).copy()
                floor = 1e-12 * max(diag.max(initial=0.0), 1.0)
                diag = np.maximum(diag, floor)
                escalations = 0
                improved = False
                while True:
                    try:
                        L = np.linalg.cholesky(Hr + lam * np.diag(diag))
                    except np.linalg.LinAlgError:
                        lam *= 10.0
                        escalations += 1
                        if escalations > max_escalations:
                            raise np.linalg.LinAlgError("normal equations remain singular after damping escalation")
                        continue
                    delta = -np.linalg.solve(L.T, np.linalg.solve(L, gr))
                    cand = self._retract(state, delta)
                    new_cost = self.cost(cand, c)
                    if new_cost < costs[-1]:
                        improved = True
                        lam = max(lam / 10.0, 1e-12)
                        break
                    lam *= 10.0
                    escalations += 1
                    if escalations > max_escalations:
                        break
                if not improved:
                    break
                decrease = costs[-1] - new_cost
                state = cand
                costs.append(new_cost)
                if decrease <= rel_tol * max(costs[-2], 1e-300) or new_cost == 0.0:
                    break
            else:
                report.converged = False
            report.iterations.append(it)
            report.costs.append(costs)
        return state


def chain_state(graph: PoseGraph, start: Pose2 = Pose2(), biases: np.ndarray | None = None) -> GraphState:
    """Initial state obtained by composing the odometry measurements."""
    poses = [start] * graph.n_nodes
    by_i = {f.i: f for f in graph.odometry}
    for m in range(1, graph.n_nodes):
        poses[m] = poses[m - 1] @ by_i[m - 1].measurement
    if graph.use_bias and biases is None:
        biases = np.zeros(graph.n_nodes)
        for f in graph.odometry:
            biases[f.i] = f.dro_bias
        if graph.n_nodes > 1:
            biases[-1] = biases[-2]
    return GraphState(poses_to_array(poses), biases if graph.use_bias else None)


# ---------------------------------------------------------------------------
# g2o-style text I/O
#
#   VERTEX_SE2 id x y theta
#   VERTEX_BIAS id b                         (custom)
#   EDGE_SE2 i j dx dy dtheta I11 I12 I13 I22 I23 I33
#   EDGE_SE2_BIAS i j dx dy dtheta dt b_ref I11 ... I33   (custom, odometry with bias)
#   EDGE_BIAS i j information                (custom)
#   BIAS_PRIOR mean information              (custom)
#
# EDGE_SE2 between consecutive ids is read back as odometry, otherwise as a loop.


def _info_tokens(info: np.ndarray) -> list[str]:
    return [repr(float(info[a, b])) for a, b in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))]


def _info_from(tokens) -> np.ndarray:
    i11, i12, i13, i22, i23, i33 = (float(t) for t in tokens)
    return np.array([[i11, i12, i13], [i12, i22, i23], [i13, i23, i33]])


def write_g2o(path: str | Path, graph: PoseGraph, state: GraphState) -> None:
    def num(*values) -> str:
        return " ".join(repr(float(v)) for v in values)

    lines = []
    for k, p in enumerate(state.poses):
        lines.append(f"VERTEX_SE2 {k} {num(*p)}")
    if graph.use_bias:
        for k, b in enumerate(state.biases):
            lines.append(f"VERTEX_BIAS {k} {num(b)}")
        if graph.bias_prior is not None:
            lines.append(f"BIAS_PRIOR {num(*graph.bias_prior)}")
    for f in graph.odometry:
        m = f.measurement
        if graph.use_bias:
            head = f"EDGE_SE2_BIAS {f.i} {f.j} {num(m.x, m.y, m.theta, f.dt, f.dro_bias)}"
        else:
            head = f"EDGE_SE2 {f.i} {f.j} {num(m.x, m.y, m.theta)}"
        lines.append(" ".join([head, *_info_tokens(f.information)]))
    for f in graph.loops:
        m = f.measurement
        lines.append(" ".join([f"EDGE_SE2 {f.i} {f.j} {num(m.x, m.y, m.theta)}", *_info_tokens(f.information)]))
    for f in graph.bias_factors:
        lines.append(f"EDGE_BIAS {f.i} {f.j} {num(f.information)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_g2o(path: str | Path) -> tuple[PoseGraph, GraphState]:
    poses: dict[int, tuple[float, float, float]] = {}
    biases: dict[int, float] = {}
    odo, loops, bfs = [], [], []
    prior = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        kind = tok[0]
        try:
            if kind == "VERTEX_SE2":
                poses[int(tok[1])] = tuple(float(v) for v in tok[2:5])
            elif kind == "VERTEX_BIAS":
                biases[int(tok[1])] = float(tok[2])
            elif kind == "BIAS_PRIOR":
                prior = (float(tok[1]), float(tok[2]))
            elif kind == "EDGE_SE2":
                i, j = int(tok[1]), int(tok[2])
                meas = Pose2(*(float(v) for v in tok[3:6]))
                info = _info_from(tok[6:12])
                if j == i + 1:
                    odo.append(OdometryFactor(i, meas, info))
                else:
                    loops.append(LoopFactor(i, j, meas, info))
            elif kind == "EDGE_SE2_BIAS":
                i, j = int(tok[1]), int(tok[2])
                if j != i + 1:
                    raise ValueError("bias-corrected odometry must be consecutive")
                meas = Pose2(*(float(v) for v in tok[3:6]))
                odo.append(OdometryFactor(i, meas, _info_from(tok[8:14]), float(tok[6]), float(tok[7])))
            elif kind == "EDGE_BIAS":
                bfs.append(BiasFactor(int(tok[1]), float(tok[3])))
            else:
                raise ValueError(f"unknown record {kind}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    n = len(poses)
    if sorted(poses) != list(range(n)):
        raise ValueError("vertex ids must be 0..N-1")
    use_bias = bool(biases)
    graph = PoseGraph(n, use_bias=use_bias, bias_prior=prior)
    for f in odo:
        graph.add_odometry(f)
    for f in loops:
        graph.add_loop(f)
    for f in bfs:
        graph.add_bias_factor(f)
    state = GraphState(
        np.array([poses[k] for k in range(n)]),
        np.array([biases[k] for k in range(n)]) if use_bias else None,
    )
    return graph, state
