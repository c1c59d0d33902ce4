"""Deterministic world, trajectory, IMU and LiDAR simulation.

The world is a set of solid axis-aligned boxes. Trajectories are built from
straight moves with trapezoidal speed profiles, in-place yaw turns and dwells;
every segment boundary lies on the IMU sample grid, so the piecewise-constant
accelerations are integrated exactly by a sample-and-hold IMU model.

IMU convention: the sample stamped ``t_k`` describes the interval
``(t_k - dt, t_k]`` and reports the ideal rates evaluated at its midpoint.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Pose, Quaternion, quat_exp

GRAVITY = np.array([0.0, 0.0, -9.81])
MISS = math.inf

LIDAR_KINDS = ("fixed3d", "rotating2d", "rotating3d")

# RNG stream identifiers, combined with the user seed
IMU_STREAM = 1
LIDAR_STREAM = 2


# --- world ---------------------------------------------------------------------


@dataclass(frozen=True)
class WorldModel:
    boxes: np.ndarray  # (n, 2, 3): min corner, max corner

    def __post_init__(self):
        b = np.array(self.boxes, dtype=float).reshape(-1, 2, 3)
        if np.any(b[:, 1] - b[:, 0] <= 0):
            raise ValueError("world boxes need strictly positive extent on every axis")
        b.setflags(write=False)
        object.__setattr__(self, "boxes", b)

    @classmethod
    def from_boxes(cls, boxes: Sequence[Sequence[float]]) -> "WorldModel":
        return cls(np.array([[b[:3], b[3:]] for b in boxes], dtype=float))

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        inside = np.all((p >= self.boxes[:, 0]) & (p <= self.boxes[:, 1]), axis=1)
        return bool(np.any(inside))

    def surface_distance(self, points) -> np.ndarray:
        """Distance from each point to the nearest box surface."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        best = np.full(len(pts), np.inf)
        for lo, hi in self.boxes:
            outside = np.maximum(np.maximum(lo - pts, pts - hi), 0.0)
            d_out = np.linalg.norm(outside, axis=1)
            d_in = np.min(np.minimum(pts - lo, hi - pts), axis=1)
            inside = np.all((pts >= lo) & (pts <= hi), axis=1)
            best = np.minimum(best, np.where(inside, d_in, d_out))
        return best

    def digest(self) -> str:
        text = " ".join(f"{v:.9g}" for v in self.boxes.ravel())
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def ray_cast_many(world: WorldModel, origins, directions, max_range: float) -> np.ndarray:
    """Slab-method ray casting; returns ranges with ``inf`` for misses.

    Boxes that contain the ray origin are ignored.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    o, d = np.broadcast_arrays(o, d)
    best = np.full(len(d), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        for lo, hi in world.boxes:
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
            t_near = np.max(np.fmin(t1, t2), axis=1)
            t_far = np.min(np.fmax(t1, t2), axis=1)
            hit = (t_near <= t_far) & (t_near > 0.0)
            best = np.where(hit & (t_near < best), t_near, best)
    best[best > max_range] = np.inf
    return best


def ray_cast(world: WorldModel, origin, direction, max_range: float) -> float:
    return float(ray_cast_many(world, origin, direction, max_range)[0])


# --- trajectory ------------------------------------------------------------------


@dataclass(frozen=True)
class Waypoint:
    position: tuple[float, float, float]
    yaw: float = 0.0  # radians
    dwell: float = 0.0  # seconds spent hovering after arrival


@dataclass(frozen=True)
class TrajectorySpec:
    waypoints: tuple[Waypoint, ...]
    max_speed: float = 0.5
    max_accel: float = 0.25
    max_yaw_rate: float = math.radians(20.0)
    max_yaw_accel: float = math.radians(20.0)
    rate: float = 200.0


@dataclass(frozen=True)
class _Segment:
    kind: str  # "dwell" | "move" | "turn"
    k0: int  # start index on the sample grid
    n_acc: int
    n_cruise: int
    start: np.ndarray
    direction: np.ndarray  # unit move direction, or yaw sign in [0]
    peak: float  # cruise speed (m/s or rad/s)
    yaw0: float

    @property
    def n_total(self) -> int:
        if self.kind == "dwell":
            return self.n_cruise
        return 2 * self.n_acc + self.n_cruise


def _profile(distance: float, vmax: float, amax: float, dt: float) -> tuple[int, int, float]:
    """Grid-aligned trapezoidal (or triangular) profile: (n_acc, n_cruise, peak)."""
    if distance <= 0.0:
        return 0, 0, 0.0
    if distance <= vmax * vmax / amax:
        n_acc = max(1, math.ceil(math.sqrt(distance / amax) / dt - 1e-9))
        return n_acc, 0, distance / (n_acc * dt)
    n_acc = max(1, math.ceil(vmax / amax / dt - 1e-9))
    n_cruise = max(0, math.ceil((distance / vmax - n_acc * dt) / dt - 1e-9))
    return n_acc, n_cruise, distance / ((n_acc + n_cruise) * dt)


def _along(seg: _Segment, tau: np.ndarray, dt: float):
    """Path coordinate, rate and acceleration at local time ``tau``."""
    ta = seg.n_acc * dt
    tc = seg.n_cruise * dt
    v = seg.peak
    a = v / ta if ta > 0 else 0.0
    s = np.empty_like(tau)
    sd = np.empty_like(tau)
    sdd = np.empty_like(tau)
    m1 = tau < ta
    m2 = (tau >= ta) & (tau < ta + tc)
    m3 = tau >= ta + tc
    s[m1] = 0.5 * a * tau[m1] ** 2
    sd[m1] = a * tau[m1]
    sdd[m1] = a
    s[m2] = 0.5 * a * ta * ta + v * (tau[m2] - ta)
    sd[m2] = v
    sdd[m2] = 0.0
    r = np.minimum(tau[m3] - ta - tc, ta)
    s[m3] = 0.5 * a * ta * ta + v * tc + v * r - 0.5 * a * r * r
    sd[m3] = v - a * r
    sdd[m3] = np.where(tau[m3] - ta - tc < ta, -a, 0.0)
    return s, sd, sdd


class Trajectory:
    """Ground-truth body trajectory built from a waypoint specification."""

    def __init__(self, spec: TrajectorySpec, world: WorldModel | None = None):
        if not spec.waypoints:
            raise ValueError("trajectory needs at least one waypoint")
        if spec.max_speed <= 0 or spec.max_accel <= 0:
            raise ValueError("speed and acceleration caps must be positive")
        if world is not None:
            for wp in spec.waypoints:
                if world.contains(wp.position):
                    raise ValueError(f"waypoint {wp.position} lies inside an occupied box")
        self.spec = spec
        self.dt = 1.0 / spec.rate
        self.segments: list[_Segment] = []
        k = 0
        pos = np.array(spec.waypoints[0].position, dtype=float)
        yaw = spec.waypoints[0].yaw
        k = self._dwell(k, pos, yaw, spec.waypoints[0].dwell)
        for wp in spec.waypoints[1:]:
            target = np.array(wp.position, dtype=float)
            delta = target - pos
            dist = float(np.linalg.norm(delta))
            if dist > 0:
                n_acc, n_cruise, peak = _profile(dist, spec.max_speed, spec.max_accel, self.dt)
                self.segments.append(_Segment("move", k, n_acc, n_cruise, pos, delta / dist, peak, yaw))
                k += 2 * n_acc + n_cruise
            pos = target
            dyaw = (wp.yaw - yaw + math.pi) % (2 * math.pi) - math.pi
            if abs(dyaw) > 0:
                n_acc, n_cruise, peak = _profile(abs(dyaw), spec.max_yaw_rate, spec.max_yaw_accel, self.dt)
                sign = np.array([math.copysign(1.0, dyaw), 0.0, 0.0])
                self.segments.append(_Segment("turn", k, n_acc, n_cruise, pos, sign, peak, yaw))
                k += 2 * n_acc + n_cruise
                yaw = yaw + dyaw
            k = self._dwell(k, pos, yaw, wp.dwell)
        self.n_steps = k
        self._final = (pos, yaw)
        self._starts = np.array([s.k0 for s in self.segments], dtype=int)

    def _dwell(self, k: int, pos, yaw: float, duration: float) -> int:
        n = int(round(duration / self.dt))
        if n > 0:
            self.segments.append(_Segment("dwell", k, 0, n, pos, np.zeros(3), 0.0, yaw))
        return k + n

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def state(self, t) -> dict[str, np.ndarray]:
        """Position, velocity, acceleration (world), yaw, yaw rate at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = len(t)
        p = np.tile(self._final[0], (n, 1))
        v = np.zeros((n, 3))
        a = np.zeros((n, 3))
        yaw = np.full(n, self._final[1])
        yaw_rate = np.zeros(n)
        if self.segments:
            # tiny bias so that grid times resolve to the segment that starts there
            idx = np.searchsorted(self._starts * self.dt, t + 1e-12, side="right") - 1
            for i in np.unique(idx[idx >= 0]):
                seg = self.segments[i]
                m = idx == i
                tau = t[m] - seg.k0 * self.dt
                end = seg.n_total * self.dt
                inside = tau <= end + 1e-12
                tau = np.minimum(tau, end)
                if seg.kind == "dwell":
                    p[m] = seg.start
                    yaw[m] = seg.yaw0
                    continue
                s, sd, sdd = _along(seg, tau, self.dt)
                sd = np.where(inside, sd, 0.0)
                sdd = np.where(inside, sdd, 0.0)
                if seg.kind == "move":
                    p[m] = seg.start + s[:, None] * seg.direction
                    v[m] = sd[:, None] * seg.direction
                    a[m] = sdd[:, None] * seg.direction
                    yaw[m] = seg.yaw0
                else:
                    sign = seg.direction[0]
                    p[m] = seg.start
                    yaw[m] = seg.yaw0 + sign * s
                    yaw_rate[m] = sign * sd
        return {"position": p, "velocity": v, "acceleration": a, "yaw": yaw, "yaw_rate": yaw_rate}

    def pose_at(self, t: float) -> Pose:
        st = self.state(t)
        return Pose(st["position"][0], yaw_quaternion(float(st["yaw"][0])))

    def sample(self) -> "GroundTruth":
        st = self.state(self.times)
        return GroundTruth(self.times, st["position"], st["velocity"], st["yaw"])


def yaw_quaternion(yaw: float) -> Quaternion:
    return Quaternion(math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw))


@dataclass
class GroundTruth:
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    yaws: np.ndarray

    def pose(self, i: int) -> Pose:
        return Pose(self.positions[i], yaw_quaternion(float(self.yaws[i])))

    def poses(self) -> list[Pose]:
        return [self.pose(i) for i in range(len(self.times))]

    def traversed_distance(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))


# --- IMU -------------------------------------------------------------------------


@dataclass(frozen=True)
class ImuNoiseModel:
    accel_noise: float = 0.02  # m/s^2/sqrt(Hz)
    gyro_noise: float = 0.002  # rad/s/sqrt(Hz)
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    accel_bias_walk: float = 0.0  # m/s^2*sqrt(Hz)
    gyro_bias_walk: float = 0.0  # rad/s*sqrt(Hz)

    def __post_init__(self):
        if min(self.accel_noise, self.gyro_noise, self.accel_bias_walk, self.gyro_bias_walk) < 0:
            raise ValueError("noise densities must be non-negative")

    @classmethod
    def noiseless(cls) -> "ImuNoiseModel":
        return cls(0.0, 0.0)


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray  # rad/s, body frame
    accel: np.ndarray  # specific force, m/s^2, body frame


def ideal_imu(traj: Trajectory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noise-free (times, gyro, specific force) for samples 1..n."""
    dt = traj.dt
    times = np.arange(1, traj.n_steps + 1) * dt
    st = traj.state(times - 0.5 * dt)
    yaw = st["yaw"]
    c, s = np.cos(yaw), np.sin(yaw)
    aw = st["acceleration"] - GRAVITY
    # R(yaw)^T applied per sample
    f = np.stack([c * aw[:, 0] + s * aw[:, 1], -s * aw[:, 0] + c * aw[:, 1], aw[:, 2]], axis=1)
    gyro = np.zeros((len(times), 3))
    gyro[:, 2] = st["yaw_rate"]
    return times, gyro, f


def synthesize_imu(traj: Trajectory, noise: ImuNoiseModel, seed) -> list[ImuSample]:
    times, gyro, accel = ideal_imu(traj)
    n = len(times)
    rng = np.random.default_rng(np.random.SeedSequence([_seed_int(seed), IMU_STREAM]))
    dt = traj.dt
    wn = rng.standard_normal((n, 12))
    ba = np.asarray(noise.accel_bias, dtype=float) + np.cumsum(noise.accel_bias_walk * math.sqrt(dt) * wn[:, 6:9], axis=0)
    bg = np.asarray(noise.gyro_bias, dtype=float) + np.cumsum(noise.gyro_bias_walk * math.sqrt(dt) * wn[:, 9:12], axis=0)
    accel = accel + ba + noise.accel_noise / math.sqrt(dt) * wn[:, 0:3]
    gyro = gyro + bg + noise.gyro_noise / math.sqrt(dt) * wn[:, 3:6]
    return [ImuSample(float(times[i]), gyro[i], accel[i]) for i in range(n)]


def _seed_int(seed) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


# --- LiDAR -----------------------------------------------------------------------


def _euler_pose(x, y, z, roll_deg, pitch_deg, yaw_deg) -> Pose:
    q = (
        quat_exp([0, 0, math.radians(yaw_deg)])
        * quat_exp([0, math.radians(pitch_deg), 0])
        * quat_exp([math.radians(roll_deg), 0, 0])
    )
    return Pose([x, y, z], q)


@dataclass(frozen=True)
class LidarModel:
    kind: str
    azimuths: np.ndarray  # per beam, radians
    elevations: np.ndarray  # per beam, radians
    max_range: float
    scan_rate: float
    motor_rpm: float = 0.0
    range_noise: float = 0.0
    mount: Pose = field(default_factory=Pose.identity)
    motor_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in LIDAR_KINDS:
            raise ValueError(f"unknown lidar kind {self.kind!r}")
        if self.kind == "fixed3d" and self.motor_rpm != 0:
            raise ValueError("fixed3d lidar must have motor speed 0")
        if self.kind != "fixed3d" and self.motor_rpm <= 0:
            raise ValueError("rotating lidar needs a positive motor speed")
        if self.max_range <= 0 or self.scan_rate <= 0:
            raise ValueError("max range and scan rate must be positive")
        az = np.array(self.azimuths, dtype=float).ravel()
        el = np.array(self.elevations, dtype=float).ravel()
        if az.shape != el.shape:
            raise ValueError("azimuth and elevation tables differ in length")
        dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
        for arr in (az, el, dirs):
            arr.setflags(write=False)
        object.__setattr__(self, "azimuths", az)
        object.__setattr__(self, "elevations", el)
        object.__setattr__(self, "_directions", dirs)

    @property
    def directions(self) -> np.ndarray:
        return self._directions

    @property
    def n_beams(self) -> int:
        return len(self.azimuths)

    @classmethod
    def hokuyo(cls, motor_rpm=30.0, max_range=30.0, scan_rate=40.0, n_beams=1081, fov_deg=270.0, **kw):
        az = np.radians(np.linspace(-0.5 * fov_deg, 0.5 * fov_deg, n_beams))
        return cls("rotating2d", az, np.zeros_like(az), max_range, scan_rate, motor_rpm, **kw)

    @classmethod
    def vlp16(cls, kind="fixed3d", motor_rpm=0.0, max_range=100.0, scan_rate=10.0, azimuth_step_deg=2.0, **kw):
        rings = np.radians(np.linspace(-15.0, 15.0, 16))
        az = np.radians(np.arange(0.0, 360.0, azimuth_step_deg))
        A, E = np.meshgrid(az, rings)
        return cls(kind, A.ravel(), E.ravel(), max_range, scan_rate, motor_rpm, **kw)

    def motor_angle(self, t: float) -> float:
        if self.motor_rpm == 0:
            return 0.0
        return (2.0 * math.pi * self.motor_rpm / 60.0 * t) % (2.0 * math.pi)

    def motor_pose(self, angle: float) -> Pose:
        return Pose(np.zeros(3), Quaternion.from_axis_angle(self.motor_axis, angle) if angle else Quaternion())

    def sensor_in_body(self, angle: float) -> Pose:
        return self.mount @ self.motor_pose(angle)


@dataclass(frozen=True)
class LineScan:
    t: float
    motor_angle: float
    ranges: np.ndarray  # inf marks a miss

    def endpoints(self, directions: np.ndarray) -> np.ndarray:
        """Sensor-frame endpoints of the hit beams."""
        hit = np.isfinite(self.ranges)
        return self.ranges[hit, None] * directions[hit]


def synthesize_scan(world: WorldModel, traj: Trajectory, lidar: LidarModel, t: float, seed) -> LineScan:
    if t < -1e-12 or t > traj.duration + 1e-9:
        raise ValueError("scan time outside trajectory span")
    angle = lidar.motor_angle(t)
    sensor = traj.pose_at(t) @ lidar.sensor_in_body(angle)
    dirs = lidar.directions @ sensor.rotation.matrix().T
    ranges = ray_cast_many(world, sensor.translation[None, :], dirs, lidar.max_range)
    if lidar.range_noise > 0:
        rng = np.random.default_rng(seed)
        noisy = ranges + lidar.range_noise * rng.standard_normal(len(ranges))
        hit = np.isfinite(ranges)
        ranges = np.where(hit, np.clip(noisy, 1e-3, lidar.max_range), np.inf)
    return LineScan(float(t), angle, ranges)


def scan_times(traj: Trajectory, lidar: LidarModel) -> np.ndarray:
    n = int(math.floor(traj.duration * lidar.scan_rate + 1e-9))
    return np.arange(1, n + 1) / lidar.scan_rate


def synthesize_scans(world: WorldModel, traj: Trajectory, lidar: LidarModel, seed) -> list[LineScan]:
    """All line scans over the trajectory; each scan owns a seed-derived RNG stream."""
    base = _seed_int(seed)
    return [
        synthesize_scan(world, traj, lidar, float(t), np.random.SeedSequence([base, LIDAR_STREAM, j]))
        for j, t in enumerate(scan_times(traj, lidar))
    ]
