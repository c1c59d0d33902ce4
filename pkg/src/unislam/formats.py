"""Plain-text file formats: sensor logs, TUM trajectories, graph and submap dumps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Pose, Quaternion
from .sim import ImuSample, LineScan


class LogFormatError(ValueError):
    pass


# --- sensor log ----------------------------------------------------------------------


@dataclass
class SensorLog:
    header: dict[str, str] = field(default_factory=dict)
    records: list = field(default_factory=list)  # ImuSample | LineScan, timestamp ordered

    @classmethod
    def merge(cls, header: dict[str, str], imu: Sequence[ImuSample], scans: Sequence[LineScan]) -> "SensorLog":
        """Interleave the streams by time; an IMU sample precedes a scan with the same stamp."""
        records: list = []
        i = j = 0
        while i < len(imu) or j < len(scans):
            if j >= len(scans) or (i < len(imu) and imu[i].t <= scans[j].t + 1e-12):
                records.append(imu[i])
                i += 1
            else:
                records.append(scans[j])
                j += 1
        return cls(dict(header), records)

    @property
    def imu(self) -> list[ImuSample]:
        return [r for r in self.records if isinstance(r, ImuSample)]

    @property
    def scans(self) -> list[LineScan]:
        return [r for r in self.records if isinstance(r, LineScan)]


def _fmt_range(r: float) -> str:
    return "inf" if math.isinf(r) else f"{r:.4f}"


def write_log(path, log: SensorLog) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for k, v in log.header.items():
            f.write(f"# {k} = {v}\n")
        for r in log.records:
            if isinstance(r, ImuSample):
                g, a = r.gyro, r.accel
                f.write(
                    f"IMU {r.t:.9f} {g[0]:.12g} {g[1]:.12g} {g[2]:.12g} {a[0]:.12g} {a[1]:.12g} {a[2]:.12g}\n"
                )
            else:
                f.write(f"SCAN {r.t:.9f} {r.motor_angle:.12g} ")
                f.write(" ".join(map(_fmt_range, r.ranges.tolist())))
                f.write("\n")


def read_log(path) -> SensorLog:
    header: dict[str, str] = {}
    records: list = []
    last_t = -math.inf
    last_imu = -math.inf
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    header[k.strip()] = v.strip()
                continue
            parts = line.split()
            if not parts:
                continue
            try:
                kind, t = parts[0], float(parts[1])
                if kind == "IMU":
                    if len(parts) != 8:
                        raise LogFormatError(f"line {lineno}: IMU record needs 7 values")
                    vals = np.array(parts[2:8], dtype=float)
                    if t <= last_imu:
                        raise LogFormatError(f"line {lineno}: IMU timestamps must increase")
                    last_imu = t
                    rec = ImuSample(t, vals[:3], vals[3:])
                elif kind == "SCAN":
                    rec = LineScan(t, float(parts[2]), np.array(parts[3:], dtype=float))
                else:
                    raise LogFormatError(f"line {lineno}: unknown record type {kind!r}")
            except (IndexError, ValueError) as exc:
                if isinstance(exc, LogFormatError):
                    raise
                raise LogFormatError(f"line {lineno}: malformed record") from exc
            if t < last_t:
                raise LogFormatError(f"line {lineno}: timestamps go backwards")
            last_t = t
            records.append(rec)
    return SensorLog(header, records)


# --- TUM trajectories --------------------------------------------------------------------


def format_tum_line(t: float, pose: Pose) -> str:
    q = pose.rotation
    vals = [t, *pose.translation, q.x, q.y, q.z, q.w]
    return " ".join(f"{v:.9g}" for v in vals)


def write_tum(path, times: Sequence[float], poses: Sequence[Pose]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t, p in zip(times, poses):
            f.write(format_tum_line(t, p) + "\n")


def read_tum(path) -> tuple[np.ndarray, list[Pose]]:
    times, poses = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                v = [float(x) for x in s.split()]
            except ValueError as exc:
                raise LogFormatError(f"{path}:{lineno}: non-numeric TUM entry") from exc
            if len(v) != 8:
                raise LogFormatError(f"{path}:{lineno}: TUM lines have 8 fields")
            times.append(v[0])
            poses.append(Pose(v[1:4], Quaternion(v[7], v[4], v[5], v[6])))
    if not times:
        raise LogFormatError(f"{path}: empty trajectory")
    return np.array(times), poses


# --- graph and submap dumps ---------------------------------------------------------------


def _pose_fields(p: Pose) -> str:
    q = p.rotation
    return " ".join(f"{v:.12g}" for v in (*p.translation, q.w, q.x, q.y, q.z))


def write_graph(path, graph) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for n in graph.nodes.values():
            f.write(f"NODE {n.id} {n.kind} {int(n.fixed)} {n.t:.9f} {_pose_fields(n.pose)}\n")
        for c in graph.constraints:
            iu = np.triu_indices(6)
            info = " ".join(f"{v:.9g}" for v in c.information[iu])
            f.write(f"EDGE {c.i} {c.j} {c.kind} {_pose_fields(c.measurement)} {info}\n")


def read_graph(path):
    from .pose_graph import PoseGraph, SpgConstraint, SpgNode

    g = PoseGraph()
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            p = line.split()
            if not p:
                continue
            if p[0] == "NODE":
                v = [float(x) for x in p[5:12]]
                pose = Pose(v[:3], Quaternion(*v[3:]))
                g.nodes[int(p[1])] = SpgNode(int(p[1]), p[2], pose, bool(int(p[3])), float(p[4]))
            elif p[0] == "EDGE":
                v = [float(x) for x in p[4:11]]
                info = np.zeros((6, 6))
                info[np.triu_indices(6)] = [float(x) for x in p[11:32]]
                info = info + np.triu(info, 1).T
                g.constraints.append(SpgConstraint(int(p[1]), int(p[2]), Pose(v[:3], Quaternion(*v[3:])), info, p[3]))
    return g


def write_submaps(path, entries: Iterable[tuple[int, int, object]]) -> None:
    """``entries``: (submap id, graph node id, Submap)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for sid, node, sm in entries:
            g = sm.grid
            o = " ".join(f"{v:.12g}" for v in g.origin)
            f.write(f"SUBMAP {sid} {node} {g.resolution:.12g} {o} {' '.join(map(str, g.shape))}\n")
            for i, j, k in g.occupied_indices():
                f.write(f"V {i} {j} {k}\n")


def read_submaps(path):
    from .mapping import VoxelGrid

    out = []
    cur = None
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            p = line.split()
            if not p:
                continue
            if p[0] == "SUBMAP":
                grid = VoxelGrid(float(p[3]), [float(x) for x in p[4:7]], tuple(int(x) for x in p[7:10]))
                cur = (int(p[1]), int(p[2]), grid)
                out.append(cur)
            elif p[0] == "V":
                cur[2].occupied[int(p[1]), int(p[2]), int(p[3])] = True
    return out


def write_csv(path, header: Sequence[str], rows: np.ndarray) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(f"{v:.9g}" for v in row) + "\n")
