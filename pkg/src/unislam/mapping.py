"""Occupancy voxels, incremental distance maps and the two-stage submap lifecycle.

Occupancy is hit-only, so the occupied set of a submap only grows and the
distance field only ever decreases. That makes the incremental update exact:
``d'(v) = min(d(v), dist(v, changed))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .geometry import Pose, Quaternion, transform_point
from .sim import LineScan


class LifecycleError(RuntimeError):
    pass


class EmptyScanError(ValueError):
    pass


# --- voxel grid --------------------------------------------------------------------


@dataclass
class VoxelGrid:
    """Bounded occupancy grid; the change log is the return value of ``insert_points``."""

    resolution: float
    origin: np.ndarray  # min corner
    shape: tuple[int, int, int]
    occupied: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.shape = tuple(int(s) for s in self.shape)
        if self.occupied is None:
            self.occupied = np.zeros(self.shape, dtype=bool)

    @classmethod
    def cube(cls, resolution: float, half_extent: float) -> "VoxelGrid":
        n = math.ceil(2.0 * half_extent / resolution - 1e-9)
        return cls(resolution, np.full(3, -half_extent), (n, n, n))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.array(self.shape) * self.resolution

    def index_of(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.floor((np.asarray(points, dtype=float) - self.origin) / self.resolution).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=1)
        return idx, ok

    def centers(self, indices: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(indices, dtype=float) + 0.5) * self.resolution

    def insert_points(self, points: np.ndarray) -> np.ndarray:
        """Mark the voxels hit by ``points``; return newly occupied indices in lexicographic order."""
        idx, ok = self.index_of(points)
        idx = idx[ok]
        if len(idx) == 0:
            return np.zeros((0, 3), dtype=np.int64)
        idx = np.unique(idx, axis=0)
        new = idx[~self.occupied[idx[:, 0], idx[:, 1], idx[:, 2]]]
        self.occupied[new[:, 0], new[:, 1], new[:, 2]] = True
        return new

    def occupied_indices(self) -> np.ndarray:
        return np.argwhere(self.occupied)

    def __len__(self) -> int:
        return int(self.occupied.sum())


# --- distance map ------------------------------------------------------------------


@dataclass(frozen=True)
class DistanceMapSnapshot:
    """Immutable truncated Euclidean distance field over a voxel grid."""

    resolution: float
    origin: np.ndarray
    field: np.ndarray
    max_range: float
    version: int = 0
    _padded: np.ndarray = field(default=None, repr=False, compare=False)
    _edge: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        f = np.array(self.field, dtype=float)
        f.setflags(write=False)
        object.__setattr__(self, "field", f)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        padded = np.pad(f, 1, constant_values=self.max_range)
        padded.setflags(write=False)
        object.__setattr__(self, "_padded", padded)
        # interpolation continues the boundary values: a d_max border would put a
        # cliff in the outermost half voxel that drags endpoints back into the grid
        edge = np.pad(f, 1, mode="edge")
        edge.setflags(write=False)
        object.__setattr__(self, "_edge", edge)

    @classmethod
    def empty(cls, grid: VoxelGrid, max_range: float) -> "DistanceMapSnapshot":
        return cls(grid.resolution, grid.origin, np.full(grid.shape, float(max_range)), float(max_range))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.field.shape

    def lookup(self, points: np.ndarray, gradient: bool = False):
        """Trilinear interpolation of the field between voxel centres.

        Beyond the outermost centres the boundary values are held constant.
        """
        pts = np.asarray(points, dtype=float)
        flat_shape = pts.shape[:-1]
        pts = pts.reshape(-1, 3)
        u = (pts - self.origin) / self.resolution - 0.5
        i0 = np.floor(u)
        fr = u - i0
        i0 = i0.astype(np.int64) + 1  # padded coordinates
        pad = self._edge
        hi = np.array(pad.shape) - 1
        lo_i = np.clip(i0, 0, hi)
        hi_i = np.clip(i0 + 1, 0, hi)
        ny, nz = pad.shape[1], pad.shape[2]
        flat = pad.ravel()
        xs = (lo_i[:, 0], hi_i[:, 0])
        ys = (lo_i[:, 1], hi_i[:, 1])
        zs = (lo_i[:, 2], hi_i[:, 2])
        c = {}
        for a in (0, 1):
            for b in (0, 1):
                for e in (0, 1):
                    c[a, b, e] = flat[(xs[a] * ny + ys[b]) * nz + zs[e]]
        fx, fy, fz = fr[:, 0], fr[:, 1], fr[:, 2]
        c00 = c[0, 0, 0] * (1 - fx) + c[1, 0, 0] * fx
        c01 = c[0, 0, 1] * (1 - fx) + c[1, 0, 1] * fx
        c10 = c[0, 1, 0] * (1 - fx) + c[1, 1, 0] * fx
        c11 = c[0, 1, 1] * (1 - fx) + c[1, 1, 1] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        val = (c0 * (1 - fz) + c1 * fz).reshape(flat_shape)
        if not gradient:
            return val
        gz = c1 - c0
        gy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
        d0 = c[1, 0, 0] - c[0, 0, 0]
        d1 = c[1, 1, 0] - c[0, 1, 0]
        d2 = c[1, 0, 1] - c[0, 0, 1]
        d3 = c[1, 1, 1] - c[0, 1, 1]
        gx = (d0 * (1 - fy) + d1 * fy) * (1 - fz) + (d2 * (1 - fy) + d3 * fy) * fz
        grad = np.stack([gx, gy, gz], axis=-1) / self.resolution
        return val, grad.reshape(flat_shape + (3,))

    def nearest(self, points: np.ndarray) -> np.ndarray:
        """Field value of the voxel containing each point (d_max outside the grid)."""
        idx = np.floor((np.asarray(points, dtype=float) - self.origin) / self.resolution).astype(np.int64)
        return self.at_indices(idx)

    def at_indices(self, idx: np.ndarray) -> np.ndarray:
        idx = np.clip(idx + 1, 0, np.array(self._padded.shape) - 1)
        return self._padded[idx[..., 0], idx[..., 1], idx[..., 2]]


def _kernel(pad: int, resolution: float, max_range: float) -> np.ndarray:
    r = np.arange(-pad, pad + 1, dtype=float)
    X, Y, Z = np.meshgrid(r, r, r, indexing="ij")
    return np.minimum(resolution * np.sqrt(X * X + Y * Y + Z * Z), max_range)


_KERNELS: dict[tuple[int, float, float], np.ndarray] = {}


def update_distance_map(dmap: DistanceMapSnapshot, changes: np.ndarray) -> DistanceMapSnapshot:
    """Lower the field around newly occupied voxels; returns a new snapshot.

    Only voxels within ``max_range`` of a change can move, so work is confined
    to the change set's bounding box grown by that radius. Small change sets
    stamp a precomputed distance kernel; larger ones run an exact EDT of the
    change set over the bounded region.
    """
    changes = np.asarray(changes, dtype=np.int64).reshape(-1, 3)
    if len(changes) == 0:
        return dmap
    res, dmax = dmap.resolution, dmap.max_range
    shape = np.array(dmap.shape)
    pad = int(math.floor(dmax / res + 1e-9))
    lo = np.maximum(changes.min(axis=0) - pad, 0)
    hi = np.minimum(changes.max(axis=0) + pad + 1, shape)
    out = np.array(dmap.field)
    box_volume = int(np.prod(hi - lo))
    kernel_cost = len(changes) * (2 * pad + 1) ** 3
    if kernel_cost <= 2 * box_volume:
        key = (pad, res, dmax)
        if key not in _KERNELS:
            _KERNELS[key] = _kernel(pad, res, dmax)
        K = _KERNELS[key]
        for c in changes:
            a = np.maximum(c - pad, 0)
            b = np.minimum(c + pad + 1, shape)
            ka = a - (c - pad)
            kb = ka + (b - a)
            region = out[a[0] : b[0], a[1] : b[1], a[2] : b[2]]
            np.minimum(region, K[ka[0] : kb[0], ka[1] : kb[1], ka[2] : kb[2]], out=region)
    else:
        mask = np.ones(tuple(hi - lo), dtype=bool)
        local = changes - lo
        mask[local[:, 0], local[:, 1], local[:, 2]] = False
        edt = ndimage.distance_transform_edt(mask, sampling=res)
        region = out[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
        np.minimum(region, np.minimum(edt, dmax), out=region)
    return DistanceMapSnapshot(res, dmap.origin, out, dmax, dmap.version + 1)


# --- accumulated scans ---------------------------------------------------------------


@dataclass(frozen=True)
class AccumulatedScan:
    id: int
    pose: Pose  # reference pose in the local world frame
    points: np.ndarray  # (n, 3) in the reference frame
    n_sources: int
    t: float = 0.0


def accumulate(
    scans: Sequence[LineScan],
    sensor_poses: Sequence[Pose],
    directions: np.ndarray,
    reference_pose: Pose | None = None,
    scan_id: int = 0,
    n_expected: int | None = None,
) -> AccumulatedScan:
    """Fuse line scans into one point set expressed in the reference frame.

    Each scan's endpoints are placed with that scan's own sensor pose, so a
    moving or rotating sensor does not smear the result. The reference
    defaults to the last scan's sensor pose.
    """
    if n_expected is not None and len(scans) != n_expected:
        raise ValueError(f"expected {n_expected} line scans, got {len(scans)}")
    if len(scans) == 0 or len(scans) != len(sensor_poses):
        raise ValueError("need one sensor pose per line scan")
    ref = reference_pose if reference_pose is not None else sensor_poses[-1]
    ref_inv = ref.inverse()
    chunks = []
    for scan, pose in zip(scans, sensor_poses):
        pts = scan.endpoints(directions)
        if len(pts):
            chunks.append(transform_point(ref_inv @ pose, pts))
    if not chunks:
        raise EmptyScanError("all beams missed; nothing to accumulate")
    return AccumulatedScan(scan_id, ref, np.concatenate(chunks), len(scans), scans[-1].t)


# --- submaps ---------------------------------------------------------------------------

GROWING, MATCHING, FINISHED = "growing", "matching", "finished"


@dataclass
class Submap:
    id: int
    anchor: Pose
    grid: VoxelGrid
    dmap: DistanceMapSnapshot
    num_scans: int = 0
    matching_scans: int = 0
    state: str = GROWING

    @classmethod
    def create(cls, id: int, anchor: Pose, resolution: float, max_range: float) -> "Submap":
        grid = VoxelGrid.cube(resolution, max_range)
        return cls(id, anchor, grid, DistanceMapSnapshot.empty(grid, max_range))


def insert_scan(submap: Submap, scan: AccumulatedScan, pose_in_submap: Pose) -> np.ndarray:
    """Voxelise the scan into the submap; returns the voxels that became occupied."""
    if submap.state == FINISHED:
        raise LifecycleError(f"submap {submap.id} is finished")
    changes = submap.grid.insert_points(transform_point(pose_in_submap, scan.points))
    submap.num_scans += 1
    if submap.state == MATCHING:
        submap.matching_scans += 1
    return changes


@dataclass(frozen=True)
class SubmapCreated:
    submap_id: int
    anchor: Pose


@dataclass(frozen=True)
class SubmapFinished:
    submap_id: int


@dataclass(frozen=True)
class ScanInserted:
    scan_id: int
    submap_id: int
    pose_in_submap: Pose
    n_changed: int


class SubmapManager:
    """Keeps one matching and one growing submap; finished ones are retained for loop closure."""

    def __init__(self, scans_per_submap: int, resolution: float, max_range: float, lattice_anchors: bool = True):
        if scans_per_submap < 1:
            raise ValueError("M must be >= 1")
        self.M = scans_per_submap
        self.resolution = resolution
        self.max_range = max_range
        # Axis-aligned anchors on the voxel lattice make every submap quantise a surface
        # the same way, so the localisation target does not jump at a submap switch.
        self.lattice_anchors = lattice_anchors
        self.submaps: dict[int, Submap] = {}
        self.active: list[int] = []  # [matching, growing]
        self._next_id = 0

    @property
    def initialized(self) -> bool:
        return bool(self.active)

    @property
    def matching(self) -> Submap | None:
        return self.submaps[self.active[0]] if self.active else None

    @property
    def growing(self) -> Submap | None:
        return self.submaps[self.active[1]] if len(self.active) > 1 else None

    def finished(self) -> list[Submap]:
        return [s for s in self.submaps.values() if s.state == FINISHED]

    def _create(self, anchor: Pose, state: str) -> Submap:
        if self.lattice_anchors:
            anchor = Pose(np.round(anchor.translation / self.resolution) * self.resolution, Quaternion())
        sm = Submap.create(self._next_id, anchor, self.resolution, self.max_range)
        sm.state = state
        self.submaps[sm.id] = sm
        self._next_id += 1
        return sm

    def initialize(self, pose: Pose) -> list:
        if self.active:
            raise LifecycleError("submap manager already initialised")
        m = self._create(pose, MATCHING)
        g = self._create(pose, GROWING)
        self.active = [m.id, g.id]
        return [SubmapCreated(m.id, m.anchor), SubmapCreated(g.id, g.anchor)]

    def advance(self, scan: AccumulatedScan, pose: Pose) -> list:
        events: list = []
        if not self.active:
            events += self.initialize(pose)
        for sid in self.active:
            sm = self.submaps[sid]
            rel = sm.anchor.inverse() @ pose
            changes = insert_scan(sm, scan, rel)
            sm.dmap = update_distance_map(sm.dmap, changes)
            events.append(ScanInserted(scan.id, sid, rel, len(changes)))
        matching = self.matching
        if matching.matching_scans >= self.M:
            matching.state = FINISHED
            events.append(SubmapFinished(matching.id))
            growing = self.growing
            growing.state = MATCHING
            new = self._create(pose, GROWING)
            self.active = [growing.id, new.id]
            events.append(SubmapCreated(new.id, new.anchor))
        return events


def lifecycle_advance(manager: SubmapManager, scan: AccumulatedScan, pose: Pose) -> list:
    return manager.advance(scan, pose)


# --- export ------------------------------------------------------------------------------


def write_ply(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(pts)}\n")
        f.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for x, y, z in pts:
            f.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def global_voxel_map(grids: Sequence[VoxelGrid], anchors: Sequence[Pose], resolution: float) -> np.ndarray:
    """Occupied voxel centres of submap grids re-anchored into one world grid, lexicographically ordered."""
    keys = []
    for grid, anchor in zip(grids, anchors):
        idx = grid.occupied_indices()
        if len(idx) == 0:
            continue
        world = transform_point(anchor, grid.centers(idx))
        keys.append(np.floor(world / resolution).astype(np.int64))
    if not keys:
        return np.zeros((0, 3))
    idx = np.unique(np.concatenate(keys), axis=0)
    return (idx + 0.5) * resolution
