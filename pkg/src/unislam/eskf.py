"""Error-state Kalman filter driven by IMU samples and pose measurements.

Error state ordering: (dp, dv, dtheta, dba, dbg), 15 dimensions. Attitude
errors are expressed in the world frame: ``q_true = exp(dtheta) * q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose, Quaternion, quat_exp, quat_log, skew, so3_exp
from .sim import GRAVITY, ImuNoiseModel, ImuSample

MAX_STEP = 0.05
# chi-square 0.999 quantile with 6 degrees of freedom
GATE_6DOF = 22.457744484825323

P, V, TH, BA, BG = (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15))
POSE_IDX = np.r_[0:3, 6:9]


class StaleSampleError(ValueError):
    """IMU sample is not newer than the filter state."""


class MeasurementRejected(RuntimeError):
    def __init__(self, mahalanobis: float):
        super().__init__(f"innovation rejected by chi-square gate (d2={mahalanobis:.3f})")
        self.mahalanobis = mahalanobis


@dataclass(frozen=True)
class EskfState:
    t: float
    p: np.ndarray
    v: np.ndarray
    q: Quaternion
    ba: np.ndarray
    bg: np.ndarray
    cov: np.ndarray
    error: np.ndarray = field(default_factory=lambda: np.zeros(15))

    @property
    def pose(self) -> Pose:
        return Pose(self.p, self.q)

    @property
    def pose_cov(self) -> np.ndarray:
        """6x6 covariance of (dp, dtheta)."""
        return self.cov[np.ix_(POSE_IDX, POSE_IDX)].copy()


def initial_state(
    t: float,
    pose: Pose,
    velocity=(0.0, 0.0, 0.0),
    sigma_p: float = 0.01,
    sigma_v: float = 0.01,
    sigma_theta: float = 0.01,
    sigma_ba: float = 0.02,
    sigma_bg: float = 0.002,
    accel_bias=(0.0, 0.0, 0.0),
    gyro_bias=(0.0, 0.0, 0.0),
) -> EskfState:
    sig = np.repeat([sigma_p, sigma_v, sigma_theta, sigma_ba, sigma_bg], 3)
    return EskfState(
        t=float(t),
        p=np.array(pose.translation, dtype=float),
        v=np.array(velocity, dtype=float),
        q=pose.rotation,
        ba=np.array(accel_bias, dtype=float),
        bg=np.array(gyro_bias, dtype=float),
        cov=np.diag(sig**2),
    )


def _step(s: EskfState, gyro, accel, dt: float, noise: ImuNoiseModel, t_new: float) -> EskfState:
    w = np.asarray(gyro, dtype=float) - s.bg
    f = np.asarray(accel, dtype=float) - s.ba
    R = s.q.matrix()
    R_mid = R @ so3_exp(0.5 * dt * w)
    f_world = R_mid @ f
    a = f_world + GRAVITY
    p = s.p + s.v * dt + 0.5 * a * dt * dt
    v = s.v + a * dt
    q = s.q * quat_exp(w * dt)

    F = np.eye(15)
    F[P, V] = np.eye(3) * dt
    F[V, TH] = -skew(f_world) * dt
    F[V, BA] = -R_mid * dt
    F[TH, BG] = -R_mid * dt
    Q = np.zeros(15)
    Q[V] = noise.accel_noise**2 * dt
    Q[TH] = noise.gyro_noise**2 * dt
    Q[BA] = noise.accel_bias_walk**2 * dt
    Q[BG] = noise.gyro_bias_walk**2 * dt
    cov = F @ s.cov @ F.T + np.diag(Q)
    cov = 0.5 * (cov + cov.T)
    return replace(s, t=t_new, p=p, v=v, q=q, cov=cov)


def propagate(state: EskfState, imu: ImuSample, noise: ImuNoiseModel) -> EskfState:
    """Strapdown-integrate one IMU sample held over (state.t, imu.t]."""
    dt = imu.t - state.t
    if not dt > 0:
        raise StaleSampleError(f"IMU sample at t={imu.t} is not newer than state t={state.t}")
    n = max(1, math.ceil(dt / MAX_STEP - 1e-9))
    h = dt / n
    s = state
    for i in range(n):
        t_new = imu.t if i == n - 1 else state.t + (i + 1) * h
        s = _step(s, imu.gyro, imu.accel, h, noise, t_new)
    return s


@dataclass(frozen=True)
class PseudoPoseMeasurement:
    """World-frame pose measurement with a 6x6 covariance over (position, rotation)."""

    position: np.ndarray
    rotation: Quaternion
    cov: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.cov, dtype=float)
        if R.shape != (6, 6):
            raise ValueError("measurement covariance must be 6x6")
        if np.max(np.abs(R - R.T)) > 1e-9 * max(1.0, np.max(np.abs(R))):
            raise ValueError("measurement covariance must be symmetric")
        object.__setattr__(self, "cov", 0.5 * (R + R.T))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))

    @classmethod
    def from_deviation(cls, reference: Pose, deviation, cov) -> "PseudoPoseMeasurement":
        """Measurement lying ``deviation`` = (dp, dtheta) away from ``reference``."""
        d = np.asarray(deviation, dtype=float)
        return cls(reference.translation + d[:3], quat_exp(d[3:]) * reference.rotation, cov)

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.position, quat_log(self.rotation)])

    def innovation(self, state: EskfState) -> np.ndarray:
        return np.concatenate([self.position - state.p, quat_log(self.rotation * state.q.inverse())])


def update(state: EskfState, meas: PseudoPoseMeasurement, gate: float | None = GATE_6DOF) -> EskfState:
    """Kalman update with a pose measurement; raises MeasurementRejected on outliers."""
    y = meas.innovation(state)
    Pm = state.cov
    PHt = Pm[:, POSE_IDX]
    S = PHt[POSE_IDX] + meas.cov
    S = 0.5 * (S + S.T)
    K = np.linalg.solve(S, PHt.T).T
    d2 = float(y @ np.linalg.solve(S, y))
    if gate is not None and d2 > gate:
        raise MeasurementRejected(d2)
    IKH = np.eye(15)
    IKH[:, POSE_IDX] -= K
    cov = IKH @ Pm @ IKH.T + K @ meas.cov @ K.T
    cov = 0.5 * (cov + cov.T)
    return reset_error(replace(state, cov=cov, error=K @ y))


def reset_error(state: EskfState) -> EskfState:
    """Fold the error mean into the nominal state; covariance Jacobian taken as identity."""
    e = state.error
    if not np.any(e):
        return state
    return replace(
        state,
        p=state.p + e[P],
        v=state.v + e[V],
        q=quat_exp(e[TH]) * state.q,
        ba=state.ba + e[BA],
        bg=state.bg + e[BG],
        error=np.zeros(15),
    )
