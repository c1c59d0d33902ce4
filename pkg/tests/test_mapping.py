import json
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from unislam.geometry import Pose, Quaternion
from unislam.mapping import (
    AccumulatedScan,
    DistanceMapSnapshot,
    EmptyScanError,
    LifecycleError,
    ScanInserted,
    Submap,
    SubmapCreated,
    SubmapFinished,
    SubmapManager,
    VoxelGrid,
    accumulate,
    global_voxel_map,
    insert_scan,
    lifecycle_advance,
    update_distance_map,
    write_ply,
)
from unislam.sim import LineScan

FIXTURES = Path(__file__).parent / "fixtures"


def brute_field(grid: VoxelGrid, dmax: float) -> np.ndarray:
    occ = grid.occupied_indices()
    all_idx = np.argwhere(np.ones(grid.shape, dtype=bool))
    if len(occ) == 0:
        return np.full(grid.shape, dmax)
    d = cdist(all_idx.astype(float), occ.astype(float)).min(axis=1) * grid.resolution
    return np.minimum(d, dmax).reshape(grid.shape)


def brute_voxels(points, origin, res, shape):
    out = set()
    for p in points:
        idx = tuple(int(np.floor((p[i] - origin[i]) / res)) for i in range(3))
        if all(0 <= idx[i] < shape[i] for i in range(3)):
            out.add(idx)
    return sorted(out)


def homogeneous(p: Pose) -> np.ndarray:
    return p.matrix()


# --- voxel grid ------------------------------------------------------------------------


def test_cube_grid_geometry():
    g = VoxelGrid.cube(0.25, 1.0)
    assert g.shape == (8, 8, 8)
    assert np.allclose(g.origin, -1.0)
    assert np.allclose(g.upper, 1.0)


def test_insert_matches_brute_force_voxelisation():
    rng = np.random.default_rng(0)
    g = VoxelGrid.cube(0.2, 1.0)
    pts = rng.uniform(-1.3, 1.3, (500, 3))
    new = g.insert_points(pts)
    want = brute_voxels(pts, g.origin, g.resolution, g.shape)
    assert [tuple(i) for i in new] == want
    assert len(g) == len(want)


def test_reinsert_reports_only_new_voxels():
    g = VoxelGrid.cube(0.1, 1.0)
    first = g.insert_points([[0.05, 0.05, 0.05], [0.5, 0.5, 0.5]])
    assert len(first) == 2
    assert len(g.insert_points([[0.06, 0.04, 0.05]])) == 0
    second = g.insert_points([[0.06, 0.04, 0.05], [-0.5, 0.0, 0.0]])
    assert second.tolist() == [[5, 10, 10]]


def test_points_outside_grid_are_dropped():
    g = VoxelGrid.cube(0.1, 1.0)
    assert len(g.insert_points([[5.0, 0, 0], [-1.0001, 0, 0]])) == 0


# --- distance maps ---------------------------------------------------------------------


def test_empty_map_is_d_max_everywhere():
    d = DistanceMapSnapshot.empty(VoxelGrid.cube(0.1, 0.5), 0.8)
    assert np.all(d.field == 0.8)
    assert d.version == 0


def test_single_voxel_field():
    g = VoxelGrid.cube(0.1, 1.0)
    new = g.insert_points([[0.05, 0.05, 0.05]])
    d = update_distance_map(DistanceMapSnapshot.empty(g, 0.5), new)
    assert d.version == 1
    assert d.at_indices(np.array([10, 10, 10])) == 0.0
    assert d.at_indices(np.array([13, 14, 10])) == pytest.approx(0.5)
    assert d.at_indices(np.array([11, 11, 11])) == pytest.approx(0.1 * np.sqrt(3))
    assert d.at_indices(np.array([0, 0, 0])) == 0.5


@pytest.mark.parametrize("batch", [1, 7, 400])
def test_incremental_field_matches_brute_force_edt(batch):
    rng = np.random.default_rng(batch)
    g = VoxelGrid.cube(0.1, 0.8)
    dmap = DistanceMapSnapshot.empty(g, 0.45)
    pts = rng.uniform(-0.8, 0.8, (1200, 3))
    for start in range(0, len(pts), batch * 3):
        new = g.insert_points(pts[start : start + batch * 3])
        dmap = update_distance_map(dmap, new)
        if start // (batch * 3) in (0, 3):
            assert np.allclose(dmap.field, brute_field(g, 0.45), atol=1e-12)
    assert np.allclose(dmap.field, brute_field(g, 0.45), atol=1e-12)


def test_empty_change_set_returns_same_snapshot():
    g = VoxelGrid.cube(0.1, 0.5)
    d = DistanceMapSnapshot.empty(g, 0.3)
    assert update_distance_map(d, np.zeros((0, 3), dtype=np.int64)) is d


def test_old_snapshot_is_unchanged_by_update():
    g = VoxelGrid.cube(0.1, 0.5)
    d0 = DistanceMapSnapshot.empty(g, 0.3)
    d1 = update_distance_map(d0, g.insert_points([[0.0, 0.0, 0.0]]))
    assert np.all(d0.field == 0.3)
    assert d1.field.min() == 0.0
    with pytest.raises(ValueError):
        d1.field[0, 0, 0] = 1.0


def test_lookup_at_centres_returns_field():
    rng = np.random.default_rng(2)
    g = VoxelGrid.cube(0.1, 0.6)
    d = update_distance_map(DistanceMapSnapshot.empty(g, 0.4), g.insert_points(rng.uniform(-0.6, 0.6, (50, 3))))
    idx = np.argwhere(np.ones(g.shape, dtype=bool))
    assert np.allclose(d.lookup(g.centers(idx)), d.field.ravel(), atol=1e-12)
    assert np.allclose(d.nearest(g.centers(idx)), d.field.ravel())


def test_lookup_holds_boundary_values_outside():
    g = VoxelGrid.cube(0.1, 0.5)
    d = update_distance_map(DistanceMapSnapshot.empty(g, 0.3), g.insert_points([[0.45, 0.05, 0.05]]))
    inside = d.lookup(np.array([[0.45, 0.05, 0.05]]))
    outside = d.lookup(np.array([[0.9, 0.05, 0.05]]))
    assert inside[0] == pytest.approx(0.0)
    assert outside[0] == pytest.approx(0.0)
    assert d.nearest(np.array([[0.9, 0.05, 0.05]]))[0] == 0.3


def test_lookup_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    g = VoxelGrid.cube(0.1, 0.6)
    d = update_distance_map(DistanceMapSnapshot.empty(g, 0.4), g.insert_points(rng.uniform(-0.6, 0.6, (30, 3))))
    pts = rng.uniform(-0.5, 0.5, (200, 3))
    val, grad = d.lookup(pts, gradient=True)
    h = 1e-6
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        fd = (d.lookup(pts + e) - d.lookup(pts - e)) / (2 * h)
        assert np.allclose(grad[:, axis], fd, atol=1e-5)
    assert np.allclose(val, d.lookup(pts))


# --- accumulation ------------------------------------------------------------------------


def test_accumulate_places_each_scan_with_its_own_pose():
    dirs = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    s1 = LineScan(0.0, 0.0, np.array([1.0, 2.0, np.inf]))
    s2 = LineScan(0.1, 0.5, np.array([3.0, np.inf, 0.5]))
    p1 = Pose([0, 0, 0], Quaternion.from_axis_angle([0, 0, 1], 0.3))
    p2 = Pose([1, 0, 0.2], Quaternion.from_axis_angle([1, 0, 0], 0.5))
    acc = accumulate([s1, s2], [p1, p2], dirs, scan_id=4, n_expected=2)
    ref = np.linalg.inv(homogeneous(p2))
    want = []
    for scan, pose in ((s1, p1), (s2, p2)):
        for r, d in zip(scan.ranges, dirs):
            if np.isfinite(r):
                want.append((ref @ homogeneous(pose) @ np.append(r * d, 1.0))[:3])
    assert acc.id == 4 and acc.n_sources == 2 and acc.t == 0.1
    assert np.allclose(acc.points, want, atol=1e-12)
    assert acc.pose is p2


def test_accumulate_with_explicit_reference():
    dirs = np.array([[1.0, 0, 0]])
    ref = Pose([5, 0, 0])
    acc = accumulate([LineScan(0.0, 0.0, np.array([1.0]))], [Pose()], dirs, reference_pose=ref)
    assert np.allclose(acc.points, [[-4.0, 0, 0]])


def test_accumulate_errors():
    dirs = np.array([[1.0, 0, 0]])
    miss = LineScan(0.0, 0.0, np.array([np.inf]))
    with pytest.raises(EmptyScanError):
        accumulate([miss, miss], [Pose(), Pose()], dirs)
    with pytest.raises(ValueError):
        accumulate([miss], [Pose()], dirs, n_expected=2)
    with pytest.raises(ValueError):
        accumulate([miss], [Pose(), Pose()], dirs)


# --- submap lifecycle ----------------------------------------------------------------------


def tiny_scan(i: int) -> AccumulatedScan:
    return AccumulatedScan(i, Pose(), np.array([[0.3 + 0.1 * i, 0.0, 0.0], [0.0, 0.4, 0.1]]), 2, float(i))


def event_row(e):
    if isinstance(e, SubmapCreated):
        return ["SubmapCreated", e.submap_id]
    if isinstance(e, SubmapFinished):
        return ["SubmapFinished", e.submap_id]
    return ["ScanInserted", e.scan_id, e.submap_id]


def test_lifecycle_matches_hand_trace():
    trace = json.loads((FIXTURES / "lifecycle_trace.json").read_text())
    mgr = SubmapManager(trace["M"], 0.1, 1.0)
    events, active = [], []
    for i in range(trace["accumulated_scans"]):
        events += lifecycle_advance(mgr, tiny_scan(i), Pose([0.1 * i, 0, 0]))
        active.append(list(mgr.active))
    assert [event_row(e) for e in events] == trace["events"]
    assert active == trace["active_after_each_scan"]
    assert sum(isinstance(e, SubmapCreated) for e in events) == trace["counts"]["SubmapCreated"]
    assert sum(isinstance(e, SubmapFinished) for e in events) == trace["counts"]["SubmapFinished"]
    assert sum(isinstance(e, ScanInserted) for e in events) == trace["counts"]["ScanInserted"]


def test_every_finished_submap_saw_m_matching_scans():
    mgr = SubmapManager(3, 0.1, 1.0)
    for i in range(20):
        mgr.advance(tiny_scan(i), Pose([0.05 * i, 0, 0]))
    done = mgr.finished()
    assert done
    assert all(s.matching_scans == 3 and s.num_scans == 6 for s in done[1:])
    assert done[0].num_scans == 3  # the very first submap has no growing phase
    assert len(mgr.active) == 2


def test_finished_submap_rejects_inserts():
    sm = Submap.create(0, Pose(), 0.1, 1.0)
    sm.state = "finished"
    with pytest.raises(LifecycleError):
        insert_scan(sm, tiny_scan(0), Pose())


def test_double_initialisation_rejected():
    mgr = SubmapManager(3, 0.1, 1.0)
    mgr.initialize(Pose())
    with pytest.raises(LifecycleError):
        mgr.initialize(Pose())


def test_lattice_anchors_are_axis_aligned_on_the_grid():
    mgr = SubmapManager(2, 0.25, 2.0)
    pose = Pose([1.13, -0.61, 0.37], Quaternion.from_axis_angle([0, 0, 1], 0.7))
    created = mgr.initialize(pose)
    for e in created:
        assert np.allclose(e.anchor.translation, [1.25, -0.5, 0.25])
        assert e.anchor.rotation.angle() == 0.0


def test_scan_inserted_pose_is_relative_to_anchor():
    mgr = SubmapManager(3, 0.1, 1.0, lattice_anchors=False)
    anchor = Pose([1, 2, 0], Quaternion.from_axis_angle([0, 0, 1], 0.4))
    mgr.advance(tiny_scan(0), anchor)
    pose = Pose([1.3, 2.1, 0], Quaternion.from_axis_angle([0, 0, 1], 0.5))
    ev = [e for e in mgr.advance(tiny_scan(1), pose) if isinstance(e, ScanInserted)]
    rel = anchor.inverse() @ pose
    assert np.allclose(ev[0].pose_in_submap.matrix(), rel.matrix())


def test_submap_distance_map_tracks_grid():
    mgr = SubmapManager(3, 0.1, 1.0)
    mgr.advance(tiny_scan(0), Pose())
    sm = mgr.matching
    assert np.allclose(sm.dmap.field, brute_field(sm.grid, 1.0), atol=1e-12)


def test_invalid_scans_per_submap():
    with pytest.raises(ValueError):
        SubmapManager(0, 0.1, 1.0)


# --- export --------------------------------------------------------------------------------


def test_write_ply(tmp_path):
    path = tmp_path / "m.ply"
    write_ply(path, np.array([[0.0, 1.0, 2.0], [3.5, -1.0, 0.25]]))
    lines = path.read_text().splitlines()
    assert lines[0] == "ply"
    assert "element vertex 2" in lines
    assert lines[lines.index("end_header") + 1 :] == ["0.000000 1.000000 2.000000", "3.500000 -1.000000 0.250000"]


def test_global_voxel_map_merges_overlapping_submaps():
    a, b = VoxelGrid.cube(0.1, 1.0), VoxelGrid.cube(0.1, 1.0)
    a.insert_points([[0.05, 0.05, 0.05]])
    b.insert_points([[-0.95, 0.05, 0.05], [0.55, 0.05, 0.05]])
    pts = global_voxel_map([a, b], [Pose(), Pose([1.0, 0, 0])], 0.1)
    assert np.allclose(pts, [[0.05, 0.05, 0.05], [1.55, 0.05, 0.05]])
