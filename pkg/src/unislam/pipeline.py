"""End-to-end SLAM over a recorded sensor log.

Three logical workers share the work. The foreground thread runs the filter:
IMU propagation, line-scan stamping, accumulation and particle-filter
localisation against the current matching submap. A map worker inserts each
accumulated scan into the active submaps and refreshes their distance maps. An
optimisation worker searches for loop closures and solves the pose graph on a
snapshot.

All hand-offs happen at fixed points in the scan sequence, so the output does
not depend on thread timing:

* the map job for scan k-1 is collected before scan k is localised
* every I accumulated scans the map job for the current scan is awaited, the
  previous optimisation result (if any) is merged, and a new one is launched
* the last optimisation result is merged once the log is exhausted

The filter and the submaps live in a local frame that never jumps. Pose-graph
nodes live in the global frame; a new node is placed with the most recent
local-to-global correction.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import eskf, gpf
from .config import PipelineConfig, ScenarioConfig, lidar_from_header, lidar_header
from .formats import SensorLog, write_graph, write_submaps, write_tum
from .geometry import Pose, Quaternion
from .mapping import (
    EmptyScanError,
    ScanInserted,
    SubmapCreated,
    SubmapFinished,
    SubmapManager,
    accumulate,
    global_voxel_map,
    write_ply,
)
from .pose_graph import (
    INSERTION,
    SCAN,
    SUBMAP,
    LoopSearchConfig,
    PoseGraph,
    find_loop_closures,
    merge_optimized_poses,
    optimize,
)
from .sim import GroundTruth, ImuSample, Trajectory, synthesize_imu, synthesize_scans

log = logging.getLogger(__name__)

GPF_STREAM = 3
LOOP_STREAM = 4


class PipelineError(ValueError):
    pass


class _InlineExecutor:
    """Runs jobs immediately on the calling thread."""

    def submit(self, fn, *args, **kwargs) -> Future:
        fut: Future = Future()
        try:
            fut.set_result(fn(*args, **kwargs))
        except BaseException as exc:  # surfaced by .result()
            fut.set_exception(exc)
        return fut

    def shutdown(self, wait: bool = True) -> None:
        pass


# --- simulation helper -------------------------------------------------------------------


def simulate_log(scenario: ScenarioConfig, seed: int | None = None) -> tuple[SensorLog, GroundTruth]:
    """Synthesise the sensor log and ground truth for a scenario."""
    seed = scenario.seed if seed is None else seed
    traj = Trajectory(scenario.trajectory, scenario.world)
    gt = traj.sample()
    imu = synthesize_imu(traj, scenario.imu, seed)
    scans = synthesize_scans(scenario.world, traj, scenario.lidar, seed)
    p0 = gt.pose(0)
    header = {
        "format": "unislam-log 1",
        "seed": str(seed),
        "world.digest": scenario.world.digest(),
        "imu.rate": f"{scenario.trajectory.rate:.9g}",
        "init.t": f"{gt.times[0]:.9f}",
        "init.pose": " ".join(f"{v:.17g}" for v in (*p0.translation, *p0.rotation.as_array())),
        "init.velocity": " ".join(f"{v:.17g}" for v in gt.velocities[0]),
    }
    header.update(lidar_header(scenario.lidar))
    return SensorLog.merge(header, imu, scans), gt


def _initial_pose(header: dict[str, str]) -> tuple[float, Pose, np.ndarray]:
    try:
        t0 = float(header.get("init.t", "0"))
        v = [float(x) for x in header.get("init.pose", "0 0 0 1 0 0 0").split()]
        vel = np.array([float(x) for x in header.get("init.velocity", "0 0 0").split()])
    except ValueError as exc:
        raise PipelineError("malformed initial state in the log header") from exc
    if len(v) != 7 or vel.shape != (3,):
        raise PipelineError("init.pose needs 7 values and init.velocity 3")
    return t0, Pose(v[:3], Quaternion(*v[3:])), vel


# --- results -------------------------------------------------------------------------------


@dataclass
class PipelineResult:
    times: list[float]
    poses: list[Pose]
    graph: PoseGraph
    manager: SubmapManager
    submap_nodes: dict[int, int]
    scan_nodes: dict[int, int]
    events: list = field(default_factory=list)
    stats: dict[str, int] = field(default_factory=dict)
    local_poses: list[Pose] = field(default_factory=list)
    step_seconds: list[float] = field(default_factory=list)

    def map_points(self) -> np.ndarray:
        subs = [self.manager.submaps[s] for s in sorted(self.submap_nodes)]
        anchors = [self.graph.nodes[self.submap_nodes[s.id]].pose for s in subs]
        return global_voxel_map([s.grid for s in subs], anchors, self.manager.resolution)

    def summary_text(self) -> str:
        keys = sorted(self.stats)
        return "".join(f"{k} = {self.stats[k]}\n" for k in keys)


def write_outputs(result: PipelineResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "trajectory": out / "trajectory.tum",
        "map": out / "map.ply",
        "graph": out / "graph.txt",
        "submaps": out / "submaps.txt",
        "summary": out / "summary.txt",
    }
    write_tum(paths["trajectory"], result.times, result.poses)
    write_ply(paths["map"], result.map_points())
    write_graph(paths["graph"], result.graph)
    entries = [(sid, nid, result.manager.submaps[sid]) for sid, nid in sorted(result.submap_nodes.items())]
    write_submaps(paths["submaps"], entries)
    paths["summary"].write_text(result.summary_text(), encoding="utf-8")
    return paths


# --- the pipeline ---------------------------------------------------------------------------


def _information_from_cov(cov: np.ndarray, rotation: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Information of a world-frame (dp, dtheta) covariance expressed in the body frame."""
    A = np.zeros((6, 6))
    A[:3, :3] = rotation.T
    A[3:, 3:] = rotation.T
    C = A @ cov @ A.T
    evals, U = np.linalg.eigh(0.5 * (C + C.T))
    evals = np.maximum(evals, floor)
    return (U / evals) @ U.T


def _map_job(manager: SubmapManager, scan, pose: Pose):
    events = manager.advance(scan, pose)
    finished = [manager.submaps[e.submap_id] for e in events if isinstance(e, SubmapFinished)]
    m = manager.matching
    return events, finished, (m.id, m.anchor, m.dmap)


def _optimize_job(snapshot: PoseGraph, candidates, scan, scan_node, loop_cfg, seed, max_iters):
    before = snapshot.poses()
    loops = []
    if loop_cfg is not None and candidates:
        loops = find_loop_closures(snapshot, candidates, scan, scan_node, loop_cfg, seed)
        for c in loops:
            snapshot.add_constraint(c.i, c.j, c.measurement, c.information, c.kind)
    # a freshly created submap has no constraint yet; it rides along with the correction
    for nid in snapshot.unreachable():
        del snapshot.nodes[nid]
    report = optimize(snapshot, max_iters=max_iters)
    return before, snapshot.poses(), loops, report


class _Runner:
    def __init__(self, cfg: PipelineConfig, header: dict[str, str], single_thread: bool):
        self.cfg = cfg
        if cfg.lidar_model not in ("auto", header.get("lidar.kind")):
            raise PipelineError(
                f"config expects a {cfg.lidar_model} payload but the log holds {header.get('lidar.kind')!r}"
            )
        self.lidar = lidar_from_header(header)
        self.directions = self.lidar.directions
        self.noise = cfg.imu_noise()
        t0, pose0, vel0 = _initial_pose(header)
        self.state = eskf.initial_state(
            t0,
            pose0,
            vel0,
            sigma_p=cfg.init_sigma_p,
            sigma_v=cfg.init_sigma_v,
            sigma_theta=cfg.init_sigma_theta,
            sigma_ba=cfg.init_sigma_ba,
            sigma_bg=cfg.init_sigma_bg,
        )
        self.manager = SubmapManager(cfg.M, cfg.distance_map_resolution, cfg.distance_map_max_range)
        self.graph = PoseGraph()
        self.lik = gpf.LikelihoodConfig(cfg.likelihood_sigma, cfg.gpf_max_beams, cfg.distance_map_max_range)
        self.loop_cfg = (
            LoopSearchConfig(
                radius=cfg.distance_map_max_range,
                step=cfg.distance_map_resolution,
                yaw_step=math.radians(cfg.loop_yaw_step_deg),
                window=cfg.loop_window,
                yaw_window=math.radians(cfg.loop_yaw_window_deg),
                accept_ratio=cfg.loop_accept_ratio,
                sigma=cfg.likelihood_sigma,
                max_points=cfg.loop_max_points,
                information=cfg.loop_information,
            )
            if cfg.loop_closure
            else None
        )
        if single_thread:
            self.map_exec = self.opt_exec = _InlineExecutor()
        else:
            self.map_exec = ThreadPoolExecutor(max_workers=1, thread_name_prefix="map")
            self.opt_exec = ThreadPoolExecutor(max_workers=1, thread_name_prefix="opt")

        self.correction = Pose.identity()  # local -> global
        self.buffer: list = []
        self.scans: dict[int, object] = {}
        self.scan_local: dict[int, Pose] = {}
        self.scan_info: dict[int, np.ndarray] = {}
        self.scan_nodes: dict[int, int] = {}
        self.submap_nodes: dict[int, int] = {}
        self.finished: list[tuple[int, object]] = []
        self.travel = 0.0  # path length of the local trajectory, m
        self.created_at: dict[int, float] = {}  # submap id -> travel when it was created
        self.matching = None  # (submap id, anchor, dmap) after the latest collected map job
        self.pending_map: Future | None = None
        self.pending_opt: Future | None = None
        self.events: list = []
        self.dead_reckoning: list[tuple[float, Pose]] = []
        self.local_poses: list[Pose] = []
        self.step_seconds: list[float] = []
        self.stats = dict(
            accumulated_scans=0,
            empty_accumulations=0,
            gpf_applied=0,
            gpf_skipped=0,
            gpf_rejected=0,
            loop_closures=0,
            optimization_passes=0,
            submaps_created=0,
            submaps_finished=0,
            line_scans=0,
            imu_samples=0,
        )

    # -- foreground ------------------------------------------------------------------------

    def on_imu(self, sample: ImuSample) -> None:
        self.state = eskf.propagate(self.state, sample, self.noise)
        self.stats["imu_samples"] += 1
        if self.stats["line_scans"] == 0:
            self.dead_reckoning.append((sample.t, self.state.pose))

    def on_scan(self, scan) -> None:
        if len(scan.ranges) != self.lidar.n_beams:
            raise PipelineError(f"scan at t={scan.t} has {len(scan.ranges)} ranges, expected {self.lidar.n_beams}")
        self.stats["line_scans"] += 1
        sensor = self.state.pose @ self.lidar.sensor_in_body(scan.motor_angle)
        self.buffer.append((scan, sensor))
        if len(self.buffer) == self.cfg.N:
            scans, poses = zip(*self.buffer)
            self.buffer = []
            self._accumulated(list(scans), list(poses))

    def _accumulated(self, scans, poses) -> None:
        tick = time.perf_counter()
        k = self.stats["accumulated_scans"]
        try:
            acc = accumulate(scans, poses, self.directions, reference_pose=self.state.pose, scan_id=k)
        except EmptyScanError:
            self.stats["empty_accumulations"] += 1
            return
        self.stats["accumulated_scans"] += 1

        if self.pending_map is not None:
            self._collect(self.pending_map.result())
            self.pending_map = None

        posterior = None
        use_gpf = self.matching is not None and not (
            self.cfg.defer_gpf_until_first_submap and self.stats["submaps_finished"] == 0
        )
        if use_gpf:
            _, anchor, dmap = self.matching
            res = gpf.localize(
                self.state,
                acc,
                dmap,
                anchor,
                self.lik,
                self.cfg.gpf_particles,
                np.random.SeedSequence([self.cfg.seed, GPF_STREAM, k]),
                min_points=self.cfg.gpf_min_points,
                empirical_prior=self.cfg.gpf_empirical_prior,
                inlier_distance=self.cfg.gpf_inlier_distance or None,
                floor_sd=self.cfg.measurement_floor,
            )
            if res.applied:
                self.state = res.state
                posterior = res.posterior_cov
                self.stats["gpf_applied"] += 1
            elif res.posterior_cov is not None:
                self.stats["gpf_rejected"] += 1
                log.debug("scan %d: %s", k, res.reason)
            else:
                self.stats["gpf_skipped"] += 1
                log.debug("scan %d: %s", k, res.reason)

        pose = self.state.pose
        acc = type(acc)(acc.id, pose, acc.points, acc.n_sources, acc.t)
        if self.local_poses:
            self.travel += float(np.linalg.norm(pose.translation - self.local_poses[-1].translation))
        self.scans[k] = acc
        self.scan_local[k] = pose
        self.local_poses.append(pose)
        cov = posterior if posterior is not None else self.state.pose_cov
        self.scan_info[k] = _information_from_cov(cov, pose.rotation.matrix())
        self.pending_map = self.map_exec.submit(_map_job, self.manager, acc, pose)

        if (k + 1) % self.cfg.I == 0:
            self._collect(self.pending_map.result())
            self.pending_map = None
            self._merge()
            self._launch_optimization(k)
        self.step_seconds.append(time.perf_counter() - tick)

    # -- sync points ----------------------------------------------------------------------

    def _collect(self, result) -> None:
        events, finished, matching = result
        self.events.extend(events)
        for e in events:
            if isinstance(e, SubmapCreated):
                self.submap_nodes[e.submap_id] = self.graph.add_node(SUBMAP, self.correction @ e.anchor)
                self.created_at[e.submap_id] = self.travel
                self.stats["submaps_created"] += 1
            elif isinstance(e, ScanInserted):
                if e.scan_id not in self.scan_nodes:
                    acc = self.scans[e.scan_id]
                    self.scan_nodes[e.scan_id] = self.graph.add_node(
                        SCAN, self.correction @ self.scan_local[e.scan_id], t=acc.t
                    )
                self.graph.add_constraint(
                    self.submap_nodes[e.submap_id],
                    self.scan_nodes[e.scan_id],
                    e.pose_in_submap,
                    self.scan_info[e.scan_id],
                    INSERTION,
                )
            elif isinstance(e, SubmapFinished):
                self.stats["submaps_finished"] += 1
        for sm in finished:
            self.finished.append((self.submap_nodes[sm.id], sm))
        self.matching = matching

    def _loop_candidates(self):
        # submaps we have not yet driven away from are still overlapped by the live ones;
        # matching against them only picks up aliasing along featureless directions
        min_travel = self.cfg.loop_min_travel or 2.0 * self.cfg.distance_map_max_range
        return [(nid, sm) for nid, sm in self.finished if self.travel - self.created_at[sm.id] > min_travel]

    def _launch_optimization(self, k: int) -> None:
        self.stats["optimization_passes"] += 1
        snap = self.graph.snapshot()
        self.pending_opt = self.opt_exec.submit(
            _optimize_job,
            snap,
            self._loop_candidates(),
            self.scans[k],
            self.scan_nodes[k],
            self.loop_cfg,
            np.random.SeedSequence([self.cfg.seed, LOOP_STREAM, k]),
            self.cfg.optimizer_max_iters,
        )

    def _merge(self) -> None:
        if self.pending_opt is None:
            return
        before, optimized, loops, report = self.pending_opt.result()
        self.pending_opt = None
        log.debug("optimisation: cost %.4g -> %.4g in %d iterations", report.initial_cost, report.final_cost, report.iterations)
        h = max(optimized)
        correction = optimized[h] @ before[h].inverse()
        merged = merge_optimized_poses(before, optimized, self.graph.poses())
        for nid, pose in merged.items():
            self.graph.nodes[nid].pose = pose
        for c in loops:
            self.graph.add_constraint(c.i, c.j, c.measurement, c.information, c.kind)
        self.stats["loop_closures"] += len(loops)
        self.correction = correction @ self.correction

    def finish(self) -> PipelineResult:
        try:
            if self.pending_map is not None:
                self._collect(self.pending_map.result())
                self.pending_map = None
            self._merge()
        finally:
            self.map_exec.shutdown(wait=True)
            self.opt_exec.shutdown(wait=True)
        self.stats["leftover_line_scans"] = len(self.buffer)
        ids = sorted(self.scan_nodes)
        if ids:
            times = [self.scans[k].t for k in ids]
            poses = [self.graph.nodes[self.scan_nodes[k]].pose for k in ids]
        else:
            times = [t for t, _ in self.dead_reckoning]
            poses = [p for _, p in self.dead_reckoning]
        return PipelineResult(
            times,
            poses,
            self.graph,
            self.manager,
            dict(self.submap_nodes),
            dict(self.scan_nodes),
            self.events,
            dict(self.stats),
            self.local_poses,
            self.step_seconds,
        )

    def abort(self) -> None:
        self.map_exec.shutdown(wait=True)
        self.opt_exec.shutdown(wait=True)


def run_pipeline(log_data: SensorLog, cfg: PipelineConfig, single_thread: bool = False) -> PipelineResult:
    if not log_data.records:
        raise PipelineError("the sensor log holds no records")
    runner = _Runner(cfg, log_data.header, single_thread)
    try:
        for rec in log_data.records:
            if isinstance(rec, ImuSample):
                runner.on_imu(rec)
            else:
                runner.on_scan(rec)
    except BaseException:
        runner.abort()
        raise
    return runner.finish()
