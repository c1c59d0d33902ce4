import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from unislam import eskf
from unislam.geometry import Pose, Quaternion, quat_exp, quat_log
from unislam.gpf import (
    DegeneratePosterior,
    LikelihoodConfig,
    ParticleSet,
    effective_sample_size,
    kalman_identity_update,
    localize,
    posterior_moments,
    recover_pseudo_measurement,
    sample_moments,
    sample_particles,
    weight_particles,
)
from unislam.mapping import AccumulatedScan, DistanceMapSnapshot, VoxelGrid, update_distance_map


def room_surface(n=4000, half=1.55, seed=0):
    """Points on the six faces of a cube room, walls on voxel-centre planes."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-half, half, (n, 3))
    axis = rng.integers(0, 3, n)
    side = rng.choice([-half, half], n)
    pts[np.arange(n), axis] = side
    return pts


def room_map(res=0.1, half=2.0, dmax=1.0):
    grid = VoxelGrid.cube(res, half)
    new = grid.insert_points(room_surface())
    return update_distance_map(DistanceMapSnapshot.empty(grid, dmax), new)


def oracle_lookup(dmap, pts):
    u = (np.asarray(pts) - dmap.origin) / dmap.resolution - 0.5
    return map_coordinates(dmap.field, u.T, order=1, mode="nearest")


def random_spd(rng, n, scale):
    A = rng.normal(size=(n, n))
    return A @ A.T * scale + np.eye(n) * scale * 0.1


def test_likelihood_config_validation():
    with pytest.raises(ValueError):
        LikelihoodConfig(sigma=0.0)
    with pytest.raises(ValueError):
        LikelihoodConfig(sigma=0.1, max_beams=0)


def test_particle_set_needs_two_particles():
    with pytest.raises(ValueError):
        ParticleSet(Pose(), np.zeros((1, 6)), np.ones(1))


def test_sampled_particles_follow_prior():
    rng = np.random.default_rng(0)
    cov = random_spd(rng, 6, 0.01)
    ps = sample_particles(Pose([1, 2, 3]), cov, 200_000, seed=1)
    mean, emp = sample_moments(ps)
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(mean) < 5 * sd / np.sqrt(200_000))
    assert np.allclose(emp, cov, rtol=0.02, atol=0.02 * sd.max() ** 2)
    assert np.allclose(ps.weights, 1.0 / 200_000)


def test_singular_prior_is_sampled_in_its_support():
    cov = np.diag([0.01, 0.01, 0.0, 0.0, 0.0, 0.001])
    ps = sample_particles(Pose(), cov, 1000, seed=2)
    assert np.all(ps.deviations[:, 2:5] == 0.0)


def test_non_psd_prior_rejected():
    with pytest.raises(ValueError):
        sample_particles(Pose(), -np.eye(6), 10, seed=0)


def test_sampling_is_seeded():
    a = sample_particles(Pose(), np.eye(6) * 0.01, 50, seed=7)
    b = sample_particles(Pose(), np.eye(6) * 0.01, 50, seed=7)
    assert np.array_equal(a.deviations, b.deviations)


def test_lookup_matches_trilinear_oracle():
    dmap = room_map()
    rng = np.random.default_rng(3)
    pts = rng.uniform(-2.3, 2.3, (5000, 3))
    assert np.allclose(dmap.lookup(pts), oracle_lookup(dmap, pts), atol=1e-12)


def test_weights_match_brute_force_likelihood():
    dmap = room_map()
    scan_pts = room_surface(200, seed=5) * 0.98
    scan = AccumulatedScan(0, Pose(), scan_pts, 1, 0.0)
    prior = Pose([0.1, -0.05, 0.02], Quaternion.from_axis_angle([0, 0, 1], 0.1))
    map_pose = Pose([0.02, 0.01, 0.0], Quaternion.from_axis_angle([1, 0, 0], 0.05))
    ps = sample_particles(prior, np.diag([0.02] * 3 + [0.003] * 3), 40, seed=6)
    cfg = LikelihoodConfig(sigma=0.15, max_beams=300, max_distance=0.6)
    got = weight_particles(ps, scan, dmap, cfg, map_pose)
    logw = []
    for dev in ps.deviations:
        q = quat_exp(dev[3:]) * prior.rotation
        t = prior.translation + dev[:3]
        world = scan_pts @ q.matrix().T + t
        local = (world - map_pose.translation) @ map_pose.rotation.matrix()
        d = np.minimum(np.minimum(oracle_lookup(dmap, local), dmap.max_range), cfg.max_distance)
        logw.append(-np.sum(d**2) / (2 * cfg.sigma**2))
    w = np.exp(np.array(logw) - max(logw))
    assert np.allclose(got.weights, w / w.sum(), atol=1e-12)
    assert not got.fallback


def test_beam_subsampling_is_seeded_and_bounded():
    dmap = room_map()
    scan = AccumulatedScan(0, Pose(), room_surface(1000, seed=8), 1, 0.0)
    ps = sample_particles(Pose(), np.eye(6) * 1e-3, 30, seed=9)
    cfg = LikelihoodConfig(sigma=0.1, max_beams=50)
    a = weight_particles(ps, scan, dmap, cfg, seed=1)
    b = weight_particles(ps, scan, dmap, cfg, seed=1)
    c = weight_particles(ps, scan, dmap, cfg, seed=2)
    assert np.array_equal(a.weights, b.weights)
    assert not np.array_equal(a.weights, c.weights)


def test_empty_scan_rejected():
    dmap = room_map()
    ps = sample_particles(Pose(), np.eye(6) * 1e-3, 10, seed=0)
    with pytest.raises(ValueError):
        weight_particles(ps, AccumulatedScan(0, Pose(), np.zeros((0, 3)), 1, 0.0), dmap, LikelihoodConfig(0.1))


def test_effective_sample_size_limits():
    assert effective_sample_size(np.full(100, 0.01)) == pytest.approx(100.0)
    one_hot = np.zeros(100)
    one_hot[7] = 1.0
    assert effective_sample_size(one_hot) == pytest.approx(1.0)


def test_posterior_moments_match_loops():
    rng = np.random.default_rng(10)
    dev = rng.normal(size=(50, 6))
    w = rng.uniform(size=50)
    w /= w.sum()
    mean, cov = posterior_moments(ParticleSet(Pose(), dev, w))
    m = sum(wk * xk for wk, xk in zip(w, dev))
    C = sum(wk * np.outer(xk - m, xk - m) for wk, xk in zip(w, dev))
    assert np.allclose(mean, m, atol=1e-12)
    assert np.allclose(cov, C, atol=1e-12)


def test_degenerate_posterior_raises():
    w = np.zeros(20)
    w[3] = 1.0
    with pytest.raises(DegeneratePosterior):
        posterior_moments(ParticleSet(Pose(), np.random.default_rng(0).normal(size=(20, 6)), w))


# --- measurement recovery ----------------------------------------------------------------


def test_recovery_halved_covariance_returns_prior_mean():
    rng = np.random.default_rng(11)
    S = random_spd(rng, 6, 0.01)
    xb = rng.normal(size=6)
    rec = recover_pseudo_measurement(xb, S, xb, S / 2)
    assert np.allclose(rec.z, xb, atol=1e-9)
    assert np.allclose(rec.cov, S, rtol=1e-6, atol=1e-12)
    assert rec.clamped == 0


def test_recovery_scalar_example():
    # prior N(0, 1), posterior N(0.3, 0.5): R = 1, z = 0.6
    rec = recover_pseudo_measurement([0.0], [[1.0]], [0.3], [[0.5]])
    assert rec.cov[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert rec.z[0] == pytest.approx(0.6, abs=1e-12)


def test_recovery_without_information_is_clamped():
    S = np.diag([0.1, 0.2, 0.3, 0.01, 0.02, 0.03])
    xb = np.arange(6.0)
    rec = recover_pseudo_measurement(xb, S, xb + 0.01, S)
    assert rec.clamped == 6
    assert np.allclose(rec.z, xb)
    assert np.all(np.linalg.eigvalsh(rec.cov) >= 1e5)
    mean, cov = kalman_identity_update(xb, S, rec.z, rec.cov)
    assert np.allclose(mean, xb, atol=1e-12)
    assert np.allclose(cov, S, atol=1e-6)


def test_recovery_round_trips_through_kalman_update():
    rng = np.random.default_rng(12)
    for _ in range(50):
        S = random_spd(rng, 6, 0.01)
        Rtrue = random_spd(rng, 6, 0.01)
        xb = rng.normal(scale=0.1, size=6)
        ztrue = rng.normal(scale=0.1, size=6)
        xh, Sh = kalman_identity_update(xb, S, ztrue, Rtrue)
        rec = recover_pseudo_measurement(xb, S, xh, Sh)
        assert np.allclose(rec.cov, Rtrue, rtol=1e-5, atol=1e-9)
        assert np.allclose(rec.z, ztrue, atol=1e-6)
        mean, cov = kalman_identity_update(xb, S, rec.z, rec.cov)
        assert np.allclose(mean, xh, atol=1e-9)
        assert np.allclose(cov, Sh, atol=1e-9)


def test_partially_informative_posterior():
    S = np.eye(6) * 0.04
    Sh = S.copy()
    Sh[0, 0] = 0.01
    xh = np.zeros(6)
    xh[0] = 0.1
    rec = recover_pseudo_measurement(np.zeros(6), S, xh, Sh)
    assert rec.clamped == 5
    # 1/R = 1/0.01 - 1/0.04 along x; z = 0 + R * (xh / 0.01)
    assert rec.cov[0, 0] == pytest.approx(1.0 / 75.0)
    assert rec.z[0] == pytest.approx(0.1 * 100.0 / 75.0)
    assert np.allclose(rec.z[1:], 0.0)


# --- localisation step ----------------------------------------------------------------------


def localisation_case(offset):
    truth = Pose([0.2, -0.1, 0.1], Quaternion.from_axis_angle([0, 0, 1], 0.2))
    body_pts = truth.inverse().apply(room_surface(3000, seed=13))
    scan = AccumulatedScan(1, Pose(), body_pts, 1, 0.0)
    prior = Pose(truth.translation + offset[:3], quat_exp(offset[3:]) * truth.rotation)
    state = eskf.initial_state(0.0, prior, sigma_p=0.06, sigma_theta=0.03)
    return truth, scan, state


def test_localize_pulls_prior_towards_truth():
    offset = np.array([0.06, -0.05, 0.04, 0.0, 0.01, -0.03])
    truth, scan, state = localisation_case(offset)
    res = localize(state, scan, room_map(), Pose(), LikelihoodConfig(0.2), 1000, seed=1)
    assert res.applied, res.reason
    before = np.linalg.norm(offset[:3])
    after = np.linalg.norm(res.state.p - truth.translation)
    rot_before = np.linalg.norm(offset[3:])
    rot_after = np.linalg.norm(quat_log(res.state.q * truth.rotation.inverse()))
    assert after < 0.5 * before
    assert rot_after < 0.75 * rot_before
    assert np.all(np.diag(res.state.pose_cov) < np.diag(state.pose_cov))
    assert res.ess > 2


def test_localize_skips_scan_outside_map():
    truth, scan, state = localisation_case(np.zeros(6))
    far = AccumulatedScan(1, Pose(), scan.points + 50.0, 1, 0.0)
    res = localize(state, far, room_map(), Pose(), LikelihoodConfig(0.1), 100, seed=1)
    assert not res.applied
    assert res.state is state


def test_localize_is_deterministic():
    offset = np.array([0.03, 0.0, 0.0, 0.0, 0.0, 0.01])
    _, scan, state = localisation_case(offset)
    dmap = room_map()
    a = localize(state, scan, dmap, Pose(), LikelihoodConfig(0.2), 300, seed=5)
    b = localize(state, scan, dmap, Pose(), LikelihoodConfig(0.2), 300, seed=5)
    assert np.array_equal(a.state.p, b.state.p)
    assert np.array_equal(a.state.cov, b.state.cov)
