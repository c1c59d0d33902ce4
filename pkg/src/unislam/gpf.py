"""Gaussian particle filter that turns a scan into a pseudo pose measurement.

Particles are pose deviations (dp, dtheta) around the ESKF prediction, drawn
from the predicted pose covariance. Each is scored against a distance map
with a likelihood-field model, the weighted set is summarised by its first
two moments, and the prediction is divided out again to leave a Gaussian
measurement (z, R) for the filter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import eskf
from .geometry import Pose, so3_exp_batch
from .mapping import AccumulatedScan, DistanceMapSnapshot

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-6


class DegeneratePosterior(RuntimeError):
    pass


@dataclass(frozen=True)
class LikelihoodConfig:
    sigma: float  # likelihood-field standard deviation, m
    max_beams: int = 300
    max_distance: float = 5.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.max_beams < 1:
            raise ValueError("max_beams must be >= 1")


@dataclass(frozen=True)
class ParticleSet:
    prior_mean: Pose
    deviations: np.ndarray  # (K, 6): dp, dtheta (world frame)
    weights: np.ndarray  # (K,)
    fallback: bool = False  # weights were reset to uniform

    def __post_init__(self):
        if len(self.deviations) < 2:
            raise ValueError("a particle set needs at least two particles")

    def __len__(self) -> int:
        return len(self.deviations)

    def rotations(self) -> np.ndarray:
        return so3_exp_batch(self.deviations[:, 3:]) @ self.prior_mean.rotation.matrix()

    def translations(self) -> np.ndarray:
        return self.prior_mean.translation + self.deviations[:, :3]

    def pose(self, k: int) -> Pose:
        return Pose.from_rt(self.rotations()[k], self.translations()[k])


def sample_particles(prior_mean: Pose, prior_cov: np.ndarray, K: int, seed) -> ParticleSet:
    cov = np.asarray(prior_cov, dtype=float)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() < -1e-9:
        raise ValueError(f"prior covariance is not PSD (min eigenvalue {evals.min():.3g})")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        L = evecs * np.sqrt(np.clip(evals, 0.0, None))
    rng = np.random.default_rng(seed)
    dev = rng.standard_normal((K, 6)) @ L.T
    return ParticleSet(prior_mean, dev, np.full(K, 1.0 / K))


def _select_points(points: np.ndarray, max_beams: int, rng: np.random.Generator) -> np.ndarray:
    if len(points) <= max_beams:
        return points
    idx = np.sort(rng.choice(len(points), size=max_beams, replace=False))
    return points[idx]


def particle_distances(
    particles: ParticleSet, points: np.ndarray, dmap: DistanceMapSnapshot, map_pose: Pose
) -> np.ndarray:
    """(K, n) clamped distance lookups of ``points`` seen from every particle."""
    RA = map_pose.rotation.matrix()
    M = RA.T @ particles.rotations()
    off = (particles.translations() - map_pose.translation) @ RA
    pts = np.einsum("kij,bj->kbi", M, points) + off[:, None, :]
    return np.minimum(dmap.lookup(pts), dmap.max_range)


def usable_points(
    scan: AccumulatedScan,
    prior: Pose,
    dmap: DistanceMapSnapshot,
    map_pose: Pose,
    inlier_distance: float | None = None,
) -> np.ndarray:
    """Endpoints that fall inside the distance map when placed at the prior pose.

    With ``inlier_distance`` set, endpoints farther than that from any mapped
    surface are dropped too: they land in parts of the submap nobody has seen yet
    and would otherwise dominate the likelihood.
    """
    local = (map_pose.inverse() @ prior).apply(scan.points)
    upper = dmap.origin + np.array(dmap.shape) * dmap.resolution
    keep = np.all((local > dmap.origin) & (local < upper), axis=1)
    if inlier_distance is not None and np.any(keep):
        near = dmap.lookup(local[keep]) <= inlier_distance
        keep[np.flatnonzero(keep)[~near]] = False
    return scan.points[keep]


def weight_particles(
    particles: ParticleSet,
    scan: AccumulatedScan,
    dmap: DistanceMapSnapshot,
    cfg: LikelihoodConfig,
    map_pose: Pose | None = None,
    seed=0,
    points: np.ndarray | None = None,
) -> ParticleSet:
    """Likelihood-field weights: log w = -sum d(T x)^2 / (2 sigma^2) over <= B endpoints."""
    map_pose = map_pose if map_pose is not None else Pose.identity()
    pts = scan.points if points is None else points
    if len(pts) == 0:
        raise ValueError("cannot weight particles against an empty scan")
    pts = _select_points(pts, cfg.max_beams, np.random.default_rng(seed))
    d = np.minimum(particle_distances(particles, pts, dmap, map_pose), cfg.max_distance)
    logw = -np.sum(d * d, axis=1) / (2.0 * cfg.sigma**2)
    w = np.exp(logw - np.max(logw))
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        log.warning("particle weights collapsed; falling back to uniform weights")
        K = len(particles)
        return replace(particles, weights=np.full(K, 1.0 / K), fallback=True)
    return replace(particles, weights=w / total)


def effective_sample_size(weights: np.ndarray) -> float:
    return float(1.0 / np.sum(np.asarray(weights) ** 2))


def posterior_moments(particles: ParticleSet, min_ess: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and covariance of the particle deviations (tangent space at the prior mean)."""
    w = particles.weights
    if min_ess and effective_sample_size(w) < min_ess:
        raise DegeneratePosterior(f"effective sample size {effective_sample_size(w):.2f} < {min_ess}")
    x = particles.deviations
    mean = w @ x
    r = x - mean
    cov = (r * w[:, None]).T @ r
    return mean, 0.5 * (cov + cov.T)


def sample_moments(particles: ParticleSet) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted moments: the prediction as represented by the drawn particles."""
    K = len(particles)
    return posterior_moments(replace(particles, weights=np.full(K, 1.0 / K)), min_ess=0)


@dataclass(frozen=True)
class RecoveredMeasurement:
    z: np.ndarray
    cov: np.ndarray
    clamped: int  # number of information directions raised to the floor


def recover_pseudo_measurement(
    prior_mean, prior_cov, post_mean, post_cov, eps: float = CLAMP_EPS
) -> RecoveredMeasurement:
    """Measurement (z, R) whose Kalman update maps the prior onto the posterior.

    R^-1 = post_cov^-1 - prior_cov^-1 and z = R (post_cov^-1 post_mean - prior_cov^-1 prior_mean),
    evaluated as z = prior_mean + R post_cov^-1 (post_mean - prior_mean). That is the same
    expression whenever no direction is clamped; along clamped directions z stays at the
    prior mean.
    """
    xb = np.asarray(prior_mean, dtype=float)
    xh = np.asarray(post_mean, dtype=float)
    S = np.asarray(prior_cov, dtype=float)
    Sh = np.asarray(post_cov, dtype=float)
    S_inv = np.linalg.inv(0.5 * (S + S.T))
    Sh_inv = np.linalg.inv(0.5 * (Sh + Sh.T))
    info = Sh_inv - S_inv
    evals, U = np.linalg.eigh(0.5 * (info + info.T))
    low = evals < eps
    evals = np.where(low, eps, evals)
    R = (U / evals) @ U.T
    R = 0.5 * (R + R.T)
    # clamped directions carry no information, so z keeps the prior mean there
    gain = (U * np.where(low, 0.0, 1.0 / evals)) @ U.T
    z = xb + gain @ (Sh_inv @ (xh - xb))
    return RecoveredMeasurement(z, R, int(low.sum()))


def kalman_identity_update(mean, cov, z, R) -> tuple[np.ndarray, np.ndarray]:
    """Standard Kalman update with an identity observation model."""
    S = cov + R
    K = np.linalg.solve(S.T, cov.T).T
    mean = mean + K @ (z - mean)
    P = (np.eye(len(mean)) - K) @ cov
    return mean, 0.5 * (P + P.T)


# --- one localisation step ------------------------------------------------------------


@dataclass(frozen=True)
class LocalizationResult:
    state: eskf.EskfState
    applied: bool
    reason: str = ""
    ess: float = 0.0
    posterior_cov: np.ndarray | None = None
    clamped: int = 0


def localize(
    state: eskf.EskfState,
    scan: AccumulatedScan,
    dmap: DistanceMapSnapshot,
    map_pose: Pose,
    cfg: LikelihoodConfig,
    n_particles: int,
    seed,
    min_points: int = 10,
    empirical_prior: bool = True,
    gate: float | None = eskf.GATE_6DOF,
    inlier_distance: float | None = None,
    floor_sd=None,
) -> LocalizationResult:
    """Sample, weight, summarise, recover (z, R) and update the ESKF."""
    prior_pose = state.pose
    points = usable_points(scan, prior_pose, dmap, map_pose, inlier_distance)
    if len(points) < min_points:
        return LocalizationResult(state, False, "too few endpoints inside the distance map")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_sample, s_select = ss.spawn(2)
    particles = sample_particles(prior_pose, state.pose_cov, n_particles, s_sample)
    particles = weight_particles(particles, scan, dmap, cfg, map_pose, s_select, points=points)
    ess = effective_sample_size(particles.weights)
    try:
        post_mean, post_cov = posterior_moments(particles)
    except DegeneratePosterior as exc:
        return LocalizationResult(state, False, str(exc), ess)
    if empirical_prior:
        prior_mean, prior_cov = sample_moments(particles)
    else:
        prior_mean, prior_cov = np.zeros(6), state.pose_cov
    jitter = 1e-12 * np.eye(6)
    rec = recover_pseudo_measurement(prior_mean, prior_cov + jitter, post_mean, post_cov + jitter)
    R = rec.cov
    if floor_sd is not None:
        # the map itself is only known to within a voxel; keep the measurement from claiming more
        R = R + np.diag(np.asarray(floor_sd, dtype=float) ** 2)
    meas = eskf.PseudoPoseMeasurement.from_deviation(prior_pose, rec.z, R)
    try:
        new_state = eskf.update(state, meas, gate=gate)
    except eskf.MeasurementRejected as exc:
        return LocalizationResult(state, False, str(exc), ess, post_cov, rec.clamped)
    return LocalizationResult(new_state, True, "", ess, post_cov, rec.clamped)
