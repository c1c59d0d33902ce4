"""Flat ``key = value`` configuration files for the SLAM pipeline and the simulator.

Only the keys in ``TABLE1_KEYS`` are expected to change when switching between
LiDAR payloads; everything else has a platform-independent default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import Pose, Quaternion
from .sim import (
    ImuNoiseModel,
    LidarModel,
    TrajectorySpec,
    Waypoint,
    WorldModel,
    _euler_pose,
)


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(items: dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def _floats(value: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in value.split()]
    except ValueError as exc:
        raise ConfigError(f"expected numbers, got {value!r}") from exc
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} numbers, got {value!r}")
    return vals


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def read_text(path_or_name: str | Path) -> str:
    """Read a config file, falling back to the scenarios bundled with the package."""
    p = Path(path_or_name)
    if p.is_file():
        return p.read_text(encoding="utf-8")
    name = p.name if p.suffix == ".cfg" else f"{p.name}.cfg"
    res = resources.files("unislam") / "scenarios" / name
    if res.is_file():
        return res.read_text(encoding="utf-8")
    raise ConfigError(f"config file not found: {path_or_name}")


# --- SLAM pipeline -------------------------------------------------------------------

TABLE1_KEYS = (
    "sigma_a",
    "sigma_g",
    "distance_map_resolution",
    "distance_map_max_range",
    "N",
    "M",
    "I",
)


@dataclass(frozen=True)
class PipelineConfig:
    # parameters that change between payloads
    N: int = 1
    M: int = 20
    I: int = 20
    sigma_a: float = 0.02
    sigma_g: float = 0.002
    distance_map_resolution: float = 0.25
    distance_map_max_range: float = 5.0
    # platform-independent settings
    accel_bias_walk: float = 1e-4
    gyro_bias_walk: float = 1e-5
    init_sigma_p: float = 0.01
    init_sigma_v: float = 0.01
    init_sigma_theta: float = 0.01
    init_sigma_ba: float = 0.02
    init_sigma_bg: float = 0.002
    gpf_particles: int = 500
    gpf_max_beams: int = 300
    gpf_sigma: float = 0.0  # 0 selects 2 x distance_map_resolution
    gpf_empirical_prior: bool = True
    gpf_min_points: int = 30
    gpf_inlier_distance: float = 1.0  # m; 0 keeps every endpoint inside the map
    gpf_floor_position: float = 0.0  # m added in quadrature to the measurement; 0 selects resolution / 2
    gpf_floor_rotation_deg: float = 0.5
    defer_gpf_until_first_submap: bool = True
    loop_closure: bool = True
    loop_window: float = 2.0
    loop_yaw_window_deg: float = 10.0
    loop_yaw_step_deg: float = 2.0
    loop_accept_ratio: float = 1.5
    loop_max_points: int = 200
    loop_min_travel: float = 0.0  # m driven since a submap was created before it may close a loop; 0 selects 2 d_max
    loop_information: tuple[float, ...] = (100.0, 100.0, 100.0, 1000.0, 1000.0, 1000.0)
    optimizer_max_iters: int = 20
    lidar_model: str = "auto"
    seed: int = 0

    def __post_init__(self):
        if min(self.N, self.M, self.I) < 1:
            raise ConfigError("N, M and I must be >= 1")
        if self.distance_map_resolution <= 0:
            raise ConfigError("distance_map_resolution must be positive")
        if self.distance_map_max_range <= self.distance_map_resolution:
            raise ConfigError("distance_map_max_range must exceed the resolution")
        if self.sigma_a < 0 or self.sigma_g < 0:
            raise ConfigError("IMU noise densities must be non-negative")
        if self.gpf_particles < 2 or self.gpf_max_beams < 1:
            raise ConfigError("gpf_particles must be >= 2 and gpf_max_beams >= 1")
        if min(self.loop_min_travel, self.gpf_floor_position, self.gpf_floor_rotation_deg, self.gpf_inlier_distance) < 0:
            raise ConfigError("distances and floors must be non-negative")
        if len(self.loop_information) != 6:
            raise ConfigError("loop_information needs six values")

    @property
    def measurement_floor(self) -> np.ndarray:
        p = self.gpf_floor_position if self.gpf_floor_position > 0 else 0.5 * self.distance_map_resolution
        r = math.radians(self.gpf_floor_rotation_deg)
        return np.array([p, p, p, r, r, r])

    @property
    def likelihood_sigma(self) -> float:
        return self.gpf_sigma if self.gpf_sigma > 0 else 2.0 * self.distance_map_resolution

    def imu_noise(self) -> ImuNoiseModel:
        return ImuNoiseModel(self.sigma_a, self.sigma_g, accel_bias_walk=self.accel_bias_walk, gyro_bias_walk=self.gyro_bias_walk)

    @classmethod
    def from_dict(cls, kv: dict[str, str]) -> "PipelineConfig":
        types = {f.name: f for f in fields(cls)}
        args: dict[str, object] = {}
        for key, value in kv.items():
            if key not in types:
                raise ConfigError(f"unknown pipeline config key {key!r}")
            default = types[key].default
            try:
                if isinstance(default, bool):
                    args[key] = _bool(value)
                elif isinstance(default, int):
                    args[key] = int(value)
                elif isinstance(default, float):
                    args[key] = float(value)
                elif isinstance(default, tuple):
                    args[key] = tuple(_floats(value))
                else:
                    args[key] = value
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
        return cls(**args)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_dict(parse_kv(read_text(path)))


# --- simulation scenario ----------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    world: WorldModel
    trajectory: TrajectorySpec
    lidar: LidarModel
    imu: ImuNoiseModel
    seed: int = 0
    raw: dict[str, str] = field(default_factory=dict, compare=False)

    @classmethod
    def from_dict(cls, kv: dict[str, str]) -> "ScenarioConfig":
        kv = dict(kv)
        get = kv.pop

        boxes = []
        for key in sorted((k for k in list(kv) if k.startswith("world.box.")), key=lambda k: int(k.rsplit(".", 1)[1])):
            boxes.append(_floats(get(key), 6))
        if not boxes:
            raise ConfigError("scenario needs at least one world.box.<i> entry")
        world = WorldModel.from_boxes(boxes)

        wps = []
        for key in sorted((k for k in list(kv) if k.startswith("trajectory.waypoint.")), key=lambda k: int(k.rsplit(".", 1)[1])):
            x, y, z, yaw_deg, dwell = _floats(get(key), 5)
            wps.append(Waypoint((x, y, z), math.radians(yaw_deg), dwell))
        if not wps:
            raise ConfigError("scenario needs at least one trajectory.waypoint.<i> entry")
        imu_rate = float(get("imu.rate", "200"))
        traj = TrajectorySpec(
            tuple(wps),
            max_speed=float(get("trajectory.max_speed", "0.5")),
            max_accel=float(get("trajectory.max_accel", "0.25")),
            max_yaw_rate=math.radians(float(get("trajectory.max_yaw_rate_deg", "20"))),
            max_yaw_accel=math.radians(float(get("trajectory.max_yaw_accel_deg", "20"))),
            rate=imu_rate,
        )

        imu = ImuNoiseModel(
            accel_noise=float(get("imu.accel_noise", "0.02")),
            gyro_noise=float(get("imu.gyro_noise", "0.002")),
            accel_bias=tuple(_floats(get("imu.accel_bias", "0 0 0"), 3)),
            gyro_bias=tuple(_floats(get("imu.gyro_bias", "0 0 0"), 3)),
            accel_bias_walk=float(get("imu.accel_bias_walk", "0")),
            gyro_bias_walk=float(get("imu.gyro_bias_walk", "0")),
        )

        kind = get("lidar.kind", "rotating2d")
        mount = _euler_pose(*_floats(get("lidar.mount", "0 0 0 0 0 0"), 6))
        common = dict(
            range_noise=float(get("lidar.range_noise", "0.01")),
            mount=mount,
            motor_axis=tuple(_floats(get("lidar.motor_axis", "1 0 0"), 3)),
        )
        if kind == "rotating2d":
            lidar = LidarModel.hokuyo(
                motor_rpm=float(get("lidar.motor_rpm", "30")),
                max_range=float(get("lidar.max_range", "30")),
                scan_rate=float(get("lidar.scan_rate", "40")),
                n_beams=int(get("lidar.beams", "1081")),
                fov_deg=float(get("lidar.fov_deg", "270")),
                **common,
            )
        elif kind in ("fixed3d", "rotating3d"):
            lidar = LidarModel.vlp16(
                kind=kind,
                motor_rpm=float(get("lidar.motor_rpm", "0" if kind == "fixed3d" else "30")),
                max_range=float(get("lidar.max_range", "100")),
                scan_rate=float(get("lidar.scan_rate", "10")),
                azimuth_step_deg=float(get("lidar.azimuth_step_deg", "2")),
                **common,
            )
        else:
            raise ConfigError(f"unknown lidar.kind {kind!r}")
        seed = int(get("seed", "0"))
        if kv:
            raise ConfigError(f"unknown scenario keys: {sorted(kv)}")
        return cls(world, traj, lidar, imu, seed)

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        kv = parse_kv(read_text(path))
        cfg = cls.from_dict(kv)
        return ScenarioConfig(cfg.world, cfg.trajectory, cfg.lidar, cfg.imu, cfg.seed, kv)


def lidar_header(lidar: LidarModel) -> dict[str, str]:
    """Serialisable description of a LiDAR model (beam table included)."""
    m = lidar.mount
    return {
        "lidar.kind": lidar.kind,
        "lidar.max_range": f"{lidar.max_range:.9g}",
        "lidar.scan_rate": f"{lidar.scan_rate:.9g}",
        "lidar.motor_rpm": f"{lidar.motor_rpm:.9g}",
        "lidar.range_noise": f"{lidar.range_noise:.9g}",
        "lidar.motor_axis": " ".join(f"{v:.9g}" for v in lidar.motor_axis),
        "lidar.mount_translation": " ".join(f"{v:.9g}" for v in m.translation),
        "lidar.mount_rotation": " ".join(f"{v:.17g}" for v in m.rotation.as_array()),
        "lidar.azimuths": " ".join(f"{v:.17g}" for v in lidar.azimuths),
        "lidar.elevations": " ".join(f"{v:.17g}" for v in lidar.elevations),
    }


def lidar_from_header(h: dict[str, str]) -> LidarModel:
    try:
        return LidarModel(
            kind=h["lidar.kind"],
            azimuths=_floats(h["lidar.azimuths"]),
            elevations=_floats(h["lidar.elevations"]),
            max_range=float(h["lidar.max_range"]),
            scan_rate=float(h["lidar.scan_rate"]),
            motor_rpm=float(h["lidar.motor_rpm"]),
            range_noise=float(h.get("lidar.range_noise", "0")),
            mount=Pose(_floats(h["lidar.mount_translation"], 3), Quaternion(*_floats(h["lidar.mount_rotation"], 4))),
            motor_axis=tuple(_floats(h["lidar.motor_axis"], 3)),
        )
    except KeyError as exc:
        raise ConfigError(f"sensor log header lacks {exc.args[0]!r}") from exc
