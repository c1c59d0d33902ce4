"""Sparse pose graph over scan and submap nodes.

Residual of a constraint i -> j with measured relative pose Z:

    E = Z^-1 * (T_i^-1 * T_j),   r = (t_E, log(R_E))

Node updates are applied as ``t += dt`` and ``R = exp(dtheta) R`` (world-frame
perturbation); the Jacobians below are written for that retraction.
"""

from __future__ import annotations

import copy
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .geometry import Pose, Quaternion, quat_exp, right_jacobian_inv, skew, so3_exp, so3_log
from .mapping import AccumulatedScan, DistanceMapSnapshot, Submap

SCAN, SUBMAP = "scan", "submap"
INSERTION, LOOP = "insertion", "loop"


class GraphError(ValueError):
    pass


@dataclass
class SpgNode:
    id: int
    kind: str
    pose: Pose
    fixed: bool = False
    t: float = 0.0


@dataclass(frozen=True)
class SpgConstraint:
    i: int
    j: int
    measurement: Pose
    information: np.ndarray
    kind: str = INSERTION

    def __post_init__(self):
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6):
            raise ValueError("information matrix must be 6x6")
        if np.max(np.abs(info - info.T)) > 1e-9 * max(1.0, np.max(np.abs(info))):
            raise ValueError("information matrix must be symmetric")
        if np.linalg.eigvalsh(0.5 * (info + info.T)).min() < -1e-9 * max(1.0, np.max(np.abs(info))):
            raise ValueError("information matrix must be PSD")
        object.__setattr__(self, "information", 0.5 * (info + info.T))


@dataclass
class PoseGraph:
    nodes: dict[int, SpgNode] = field(default_factory=dict)
    constraints: list[SpgConstraint] = field(default_factory=list)

    def add_node(self, kind: str, pose: Pose, fixed: bool | None = None, t: float = 0.0) -> int:
        if fixed is None:
            fixed = not self.nodes
        if fixed and any(n.fixed for n in self.nodes.values()):
            raise GraphError("graph already has a fixed node")
        nid = len(self.nodes)
        self.nodes[nid] = SpgNode(nid, kind, pose, fixed, t)
        return nid

    def add_constraint(self, i: int, j: int, measurement: Pose, information, kind: str = INSERTION) -> int:
        for n in (i, j):
            if n not in self.nodes:
                raise GraphError(f"constraint endpoint {n} does not exist")
        self.constraints.append(SpgConstraint(i, j, measurement, information, kind))
        return len(self.constraints) - 1

    def poses(self) -> dict[int, Pose]:
        return {i: n.pose for i, n in self.nodes.items()}

    def snapshot(self) -> "PoseGraph":
        return PoseGraph(copy.deepcopy(self.nodes), list(self.constraints))

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes.values() if n.kind == kind)

    def unreachable(self) -> list[int]:
        fixed = [i for i, n in self.nodes.items() if n.fixed]
        if not fixed:
            return sorted(self.nodes)
        adj: dict[int, list[int]] = {i: [] for i in self.nodes}
        for c in self.constraints:
            adj[c.i].append(c.j)
            adj[c.j].append(c.i)
        seen = {fixed[0]}
        todo = deque(seen)
        while todo:
            for m in adj[todo.popleft()]:
                if m not in seen:
                    seen.add(m)
                    todo.append(m)
        return sorted(set(self.nodes) - seen)


# --- residuals ----------------------------------------------------------------------------


def residual(Ti: Pose, Tj: Pose, Z: Pose) -> np.ndarray:
    E = Z.inverse() @ (Ti.inverse() @ Tj)
    return np.concatenate([E.translation, so3_log(E.rotation.matrix())])


def residual_and_jacobians(Ti: Pose, Tj: Pose, Z: Pose):
    """Residual plus its 6x6 Jacobians w.r.t. the (dt, dtheta) perturbations of i and j."""
    Ri, Rj, Rz = Ti.rotation.matrix(), Tj.rotation.matrix(), Z.rotation.matrix()
    dt = Tj.translation - Ti.translation
    A = Rz.T @ Ri.T
    r_t = A @ dt - Rz.T @ Z.translation
    r_th = so3_log(A @ Rj)
    Jr_inv = right_jacobian_inv(r_th)
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[:3, :3] = -A
    Ji[:3, 3:] = A @ skew(dt)
    Ji[3:, 3:] = -Jr_inv @ Rj.T
    Jj[:3, :3] = A
    Jj[3:, 3:] = Jr_inv @ Rj.T
    return np.concatenate([r_t, r_th]), Ji, Jj


def retract(T: Pose, delta) -> Pose:
    delta = np.asarray(delta, dtype=float)
    return Pose(T.translation + delta[:3], quat_exp(delta[3:]) * T.rotation)


def total_cost(graph: PoseGraph, poses: dict[int, Pose] | None = None) -> float:
    poses = poses if poses is not None else graph.poses()
    cost = 0.0
    for c in graph.constraints:
        r = residual(poses[c.i], poses[c.j], c.measurement)
        cost += float(r @ c.information @ r)
    return cost


# --- optimisation ------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimizationReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool


def _linear_system(graph: PoseGraph, poses, col: dict[int, int], n_free: int):
    rows, cols, vals = [], [], []
    g = np.zeros(6 * n_free)
    cost = 0.0
    for c in graph.constraints:
        r, Ji, Jj = residual_and_jacobians(poses[c.i], poses[c.j], c.measurement)
        Om = c.information
        cost += float(r @ Om @ r)
        blocks = [(col.get(c.i), Ji), (col.get(c.j), Jj)]
        for a, Ja in blocks:
            if a is None:
                continue
            g[6 * a : 6 * a + 6] += Ja.T @ Om @ r
            for b, Jb in blocks:
                if b is None:
                    continue
                H = Ja.T @ Om @ Jb
                ii, jj = np.meshgrid(np.arange(6 * a, 6 * a + 6), np.arange(6 * b, 6 * b + 6), indexing="ij")
                rows.append(ii.ravel())
                cols.append(jj.ravel())
                vals.append(H.ravel())
    if rows:
        H = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(6 * n_free, 6 * n_free)
        ).tocsc()
    else:
        H = sp.csc_matrix((6 * n_free, 6 * n_free))
    return H, g, cost


def optimize(graph: PoseGraph, max_iters: int = 20, tol: float = 1e-9, lam: float = 1e-4) -> OptimizationReport:
    """Levenberg-Marquardt over all non-fixed node poses; updates ``graph`` in place."""
    missing = graph.unreachable()
    if missing:
        raise GraphError(f"nodes not connected to the fixed node: {missing}")
    free = [i for i, n in graph.nodes.items() if not n.fixed]
    col = {nid: k for k, nid in enumerate(free)}
    poses = graph.poses()
    initial = total_cost(graph, poses)
    cost = initial
    if not free or initial <= tol:
        return OptimizationReport(initial, initial, 0, True)
    iters = 0
    converged = False
    while iters < max_iters:
        H, g, cost = _linear_system(graph, poses, col, len(free))
        iters += 1
        diag = H.diagonal()
        accepted = False
        for _ in range(10):
            A = H + sp.diags(lam * (diag + 1e-12), format="csc")
            delta = -spsolve(A, g)
            trial = dict(poses)
            for nid, k in col.items():
                trial[nid] = retract(poses[nid], delta[6 * k : 6 * k + 6])
            new_cost = total_cost(graph, trial)
            if new_cost < cost:
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True
            break
        decrease = cost - new_cost
        poses, cost = trial, new_cost
        if decrease < tol * max(1.0, cost):
            converged = True
            break
    for nid, pose in poses.items():
        graph.nodes[nid].pose = pose
    return OptimizationReport(initial, cost, iters, converged)


# --- loop closure ------------------------------------------------------------------------


@dataclass(frozen=True)
class LoopSearchConfig:
    radius: float
    step: float  # translation grid step, m
    yaw_step: float = math.radians(2.0)
    window: float = 2.0
    yaw_window: float = math.radians(10.0)
    accept_ratio: float = 1.5  # mean distance threshold in units of resolution
    sigma: float = 0.5
    max_points: int = 200
    information: tuple[float, ...] = (100.0, 100.0, 100.0, 1000.0, 1000.0, 1000.0)
    reject_degenerate: bool = True


def _yaw_matrix(psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _alignment_cost(points: np.ndarray, dmap: DistanceMapSnapshot, pose: Pose) -> float:
    return float(np.sum(dmap.lookup(pose.apply(points)) ** 2))


def refine_alignment(points: np.ndarray, dmap: DistanceMapSnapshot, guess: Pose, iters: int = 15) -> Pose:
    """Damped Gauss-Newton on sum d(T x)^2 over a trilinear distance field.

    Only translation and yaw move; roll and pitch stay at the guess, where gravity put them.
    """
    R = guess.rotation.matrix()
    t = np.array(guess.translation)

    def cost_of(R, t):
        return float(np.sum(dmap.lookup(points @ R.T + t) ** 2))

    cost = cost_of(R, t)
    lam = 1e-3
    for _ in range(iters):
        q = points @ R.T
        d, grad = dmap.lookup(q + t, gradient=True)
        J = np.concatenate([grad, np.cross(q, grad)[:, 2:]], axis=1)
        H = J.T @ J
        b = J.T @ d
        improved = False
        for _ in range(6):
            delta = -np.linalg.solve(H + lam * (np.diag(np.diag(H)) + 1e-9 * np.eye(4)), b)
            R2 = _yaw_matrix(delta[3]) @ R
            t2 = t + delta[:3]
            c2 = cost_of(R2, t2)
            if c2 < cost:
                R, t, cost = R2, t2, c2
                lam = max(lam * 0.3, 1e-7)
                improved = True
                break
            lam *= 10.0
        if not improved or np.linalg.norm(delta) < 1e-7:
            break
    return Pose.from_rt(R, t)


def alignment_covariance(points: np.ndarray, dmap: DistanceMapSnapshot, rel: Pose) -> np.ndarray:
    """(dx, dy, dz, dyaw) covariance of an alignment with one voxel of residual noise per point.

    Directions the geometry does not constrain come out with huge variance.
    """
    R = rel.rotation.matrix()
    q = points @ R.T
    _, grad = dmap.lookup(q + rel.translation, gradient=True)
    J = np.concatenate([grad, np.cross(q, grad)[:, 2:]], axis=1)
    H = J.T @ J
    evals, U = np.linalg.eigh(H)
    inv = np.where(evals > 1e-9 * max(evals.max(), 1e-300), 1.0 / np.maximum(evals, 1e-300), 1e12)
    return dmap.resolution**2 * (U * inv) @ U.T


def is_well_constrained(cov: np.ndarray, step: float, yaw_step: float) -> bool:
    sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return bool(np.all(sd[:3] <= step) and np.all(sd[3:] <= yaw_step))


def match_scan_to_submap(points: np.ndarray, dmap: DistanceMapSnapshot, guess: Pose, cfg: LoopSearchConfig):
    """Exhaustive (dx, dy, dz, dyaw) grid search followed by continuous refinement of the same four.

    Returns (refined relative pose, mean distance of the refined alignment).
    """
    res = dmap.resolution
    w = int(round(cfg.window / cfg.step))
    ratio = cfg.step / res
    r = np.arange(-w, w + 1)
    offsets = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    n_yaw = int(round(cfg.yaw_window / cfg.yaw_step))
    R0 = guess.rotation.matrix()
    t0 = guess.translation
    best = (math.inf, 0.0, np.zeros(3))
    for k in range(-n_yaw, n_yaw + 1):
        psi = k * cfg.yaw_step
        R = _yaw_matrix(psi) @ R0
        base = points @ R.T + t0
        if abs(ratio - round(ratio)) < 1e-9:
            u = np.floor((base - dmap.origin) / res).astype(np.int64)
            idx = u[None, :, :] + (offsets * int(round(ratio)))[:, None, :]
            d = dmap.at_indices(idx)
        else:
            d = dmap.nearest(base[None, :, :] + offsets[:, None, :] * cfg.step)
        score = np.sum(d * d, axis=1)
        o = int(np.argmin(score))
        if score[o] < best[0]:
            best = (float(score[o]), psi, offsets[o] * cfg.step)
    _, psi, off = best
    coarse = Pose.from_rt(_yaw_matrix(psi) @ R0, t0 + off)
    # voxel scoring is coarse; a guess that already fits better is the safer start
    if _alignment_cost(points, dmap, guess) <= _alignment_cost(points, dmap, coarse):
        coarse = guess
    refined = refine_alignment(points, dmap, coarse)
    mean_d = float(np.mean(dmap.lookup(refined.apply(points))))
    return refined, mean_d


def find_loop_closures(
    graph: PoseGraph,
    finished: list[tuple[int, Submap]],
    scan: AccumulatedScan,
    scan_node: int,
    cfg: LoopSearchConfig,
    seed=0,
) -> list[SpgConstraint]:
    """Search finished submaps near the scan node; emit loop constraints for good alignments."""
    out = []
    scan_pose = graph.nodes[scan_node].pose
    pts = scan.points
    if len(pts) > cfg.max_points:
        rng = np.random.default_rng(seed)
        pts = pts[np.sort(rng.choice(len(pts), cfg.max_points, replace=False))]
    info = np.diag(cfg.information)
    for node_id, submap in finished:
        sub_pose = graph.nodes[node_id].pose
        if np.linalg.norm(scan_pose.translation - sub_pose.translation) > cfg.radius:
            continue
        guess = sub_pose.inverse() @ scan_pose
        local = guess.apply(pts)
        dmap = submap.dmap
        upper = dmap.origin + np.array(dmap.shape) * dmap.resolution
        inside = np.all((local > dmap.origin) & (local < upper), axis=1)
        if inside.sum() < 10:
            continue
        rel, mean_d = match_scan_to_submap(pts[inside], dmap, guess, cfg)
        if mean_d >= cfg.accept_ratio * dmap.resolution:
            continue
        # a corridor seen side-on matches equally well anywhere along its axis
        if cfg.reject_degenerate and not is_well_constrained(
            alignment_covariance(pts[inside], dmap, rel), cfg.step, cfg.yaw_step
        ):
            continue
        out.append(SpgConstraint(node_id, scan_node, rel, info, LOOP))
    return out


# --- reconciliation -----------------------------------------------------------------------


def merge_optimized_poses(
    snapshot_poses: dict[int, Pose], optimized: dict[int, Pose], live: dict[int, Pose]
) -> dict[int, Pose]:
    """Nodes inside the optimised snapshot take their optimised pose; newer nodes are
    moved rigidly by the correction of the latest optimised node."""
    if not optimized:
        return dict(live)
    h = max(optimized)
    correction = optimized[h] @ snapshot_poses[h].inverse()
    out = {}
    for nid, pose in live.items():
        out[nid] = optimized[nid] if nid in optimized else correction @ pose
    return out
