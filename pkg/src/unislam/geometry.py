"""Rotation and rigid-transform algebra.

Conventions used everywhere in the package:

* Hamilton quaternions, stored as (w, x, y, z).
* A rotation maps body-frame vectors into the world frame.
* Tangent-space perturbations of a rotation are applied on the left
  (world frame): ``q_perturbed = exp(dtheta) * q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-6


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Quaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        n = math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)
        if n == 0.0 or not math.isfinite(n):
            raise ValueError("quaternion must be finite and non-zero")
        for name in ("w", "x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)) / n)

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> "Quaternion":
        return cls(a[0], a[1], a[2], a[3])

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=float)
        return quat_exp(axis / np.linalg.norm(axis) * angle)

    @classmethod
    def from_matrix(cls, R) -> "Quaternion":
        R = np.asarray(R, dtype=float)
        tr = R[0, 0] + R[1, 1] + R[2, 2]
        if tr > 0.0:
            s = 2.0 * math.sqrt(tr + 1.0)
            return cls(0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * math.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        v = [0.0, 0.0, 0.0]
        v[i] = 0.25 * s
        v[j] = (R[j, i] + R[i, j]) / s
        v[k] = (R[k, i] + R[i, k]) / s
        return cls((R[k, j] - R[j, k]) / s, *v)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conjugate

    def canonical(self) -> "Quaternion":
        """Representative of the double cover with w >= 0."""
        if self.w < 0.0:
            return Quaternion(-self.w, -self.x, -self.y, -self.z)
        return self

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def rotate(self, v) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def angle(self) -> float:
        return float(np.linalg.norm(quat_log(self)))


def quat_exp(rotvec) -> Quaternion:
    phi = np.asarray(rotvec, dtype=float)
    theta = float(np.linalg.norm(phi))
    if theta < SMALL_ANGLE:
        # second-order series of cos(theta/2) and sin(theta/2)/theta
        return Quaternion(1.0 - theta * theta / 8.0, *(0.5 * (1.0 - theta * theta / 24.0) * phi))
    half = 0.5 * theta
    return Quaternion(math.cos(half), *(math.sin(half) / theta * phi))


def quat_log(q: Quaternion) -> np.ndarray:
    """Angle-axis vector of a unit quaternion, angle in [0, pi]."""
    q = q.canonical()
    v = q.vec
    s = float(np.linalg.norm(v))
    w = q.w
    angle = 2.0 * math.atan2(s, w)
    if angle < SMALL_ANGLE:
        return (2.0 / w) * (1.0 - s * s / (3.0 * w * w)) * v
    return (angle / s) * v


def rotation_error(q_est: Quaternion, q_gt: Quaternion) -> np.ndarray:
    """log(q_est^-1 * q_gt); components read as roll/pitch/yaw error."""
    if q_est.as_array().tolist() == q_gt.as_array().tolist():
        return np.zeros(3)  # exact, where the product would leave rounding residue
    return quat_log(q_est.inverse() * q_gt)


def slerp(q0: Quaternion, q1: Quaternion, alpha: float) -> Quaternion:
    d = q0.inverse() * q1
    return q0 * quat_exp(alpha * quat_log(d))


# --- matrix forms, used by the vectorised hot paths ---------------------------


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + math.sin(theta) / theta * K + (1 - math.cos(theta)) / theta**2 * K @ K


def so3_exp_batch(phis: np.ndarray) -> np.ndarray:
    """Rodrigues formula over an (n, 3) array, returns (n, 3, 3)."""
    phis = np.asarray(phis, dtype=float)
    theta = np.linalg.norm(phis, axis=1)
    n = len(phis)
    K = np.zeros((n, 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -phis[:, 2], phis[:, 1]
    K[:, 1, 0], K[:, 1, 2] = phis[:, 2], -phis[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -phis[:, 1], phis[:, 0]
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * (K @ K)


def so3_log(R) -> np.ndarray:
    return quat_log(Quaternion.from_matrix(R))


def right_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    c = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + c * K @ K


@dataclass(frozen=True)
class Pose:
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: Quaternion = field(default_factory=Quaternion.identity)

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, 3], Quaternion.from_matrix(T[:3, :3]))

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        return cls(t, Quaternion.from_matrix(R))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix()
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)

    def inverse(self) -> "Pose":
        return pose_inverse(self)

    def apply(self, points) -> np.ndarray:
        return transform_point(self, points)

    def __repr__(self) -> str:
        t = ", ".join(f"{c:.6g}" for c in self.translation)
        q = self.rotation
        return f"Pose(t=[{t}], q=[{q.w:.6g}, {q.x:.6g}, {q.y:.6g}, {q.z:.6g}])"


def pose_compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.translation + a.rotation.rotate(b.translation), a.rotation * b.rotation)


def pose_inverse(a: Pose) -> Pose:
    qi = a.rotation.inverse()
    return Pose(-qi.rotate(a.translation), qi)


def transform_point(a: Pose, p) -> np.ndarray:
    """Apply a pose to a single 3-vector or an (n, 3) array of points."""
    p = np.asarray(p, dtype=float)
    R = a.rotation.matrix()
    if p.ndim == 1:
        return R @ p + a.translation
    return p @ R.T + a.translation


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """Translation distance and rotation angle between two poses."""
    d = pose_inverse(a) @ b
    return float(np.linalg.norm(d.translation)), d.rotation.angle()
