"""Trajectory accuracy metrics: per-axis position error, rotation error, drift rates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Pose, rotation_error, slerp


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvaluationReport:
    times: np.ndarray
    position_errors: np.ndarray  # (n, 3) estimate - ground truth, m
    rotation_errors: np.ndarray  # (n, 3) log(q_est^-1 q_gt), rad
    traversed_distance: float
    translational_drift: float  # percent of traversed distance
    rotational_drift: float  # degrees of final yaw error per metre

    @property
    def final_error(self) -> float:
        return float(np.linalg.norm(self.position_errors[-1]))

    def summary(self) -> dict[str, float]:
        pe = self.position_errors
        re = np.degrees(np.abs(self.rotation_errors))
        return {
            "samples": len(self.times),
            "traversed_distance_m": self.traversed_distance,
            "final_position_error_m": self.final_error,
            "translational_drift_percent": self.translational_drift,
            "rotational_drift_deg_per_m": self.rotational_drift,
            "max_abs_error_x_m": float(np.max(np.abs(pe[:, 0]))),
            "max_abs_error_y_m": float(np.max(np.abs(pe[:, 1]))),
            "max_abs_error_z_m": float(np.max(np.abs(pe[:, 2]))),
            "position_rmse_m": float(np.sqrt(np.mean(np.sum(pe**2, axis=1)))),
            "mean_abs_roll_error_deg": float(np.mean(re[:, 0])),
            "mean_abs_pitch_error_deg": float(np.mean(re[:, 1])),
            "mean_abs_yaw_error_deg": float(np.mean(re[:, 2])),
        }

    def to_kv(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.summary().items())

    def to_text(self) -> str:
        s = self.summary()
        return "\n".join(
            [
                f"samples evaluated        {s['samples']}",
                f"traversed distance       {s['traversed_distance_m']:.3f} m",
                f"final position error     {s['final_position_error_m']:.3f} m",
                f"translational drift      {s['translational_drift_percent']:.3f} %",
                f"rotational drift         {s['rotational_drift_deg_per_m']:.5f} deg/m",
                "max |error| x / y / z    "
                f"{s['max_abs_error_x_m']:.3f} / {s['max_abs_error_y_m']:.3f} / {s['max_abs_error_z_m']:.3f} m",
                "mean |error| roll/pitch/yaw "
                f"{s['mean_abs_roll_error_deg']:.3f} / {s['mean_abs_pitch_error_deg']:.3f} / "
                f"{s['mean_abs_yaw_error_deg']:.3f} deg",
            ]
        ) + "\n"

    def series(self) -> tuple[list[str], np.ndarray]:
        header = ["t", "err_x_m", "err_y_m", "err_z_m", "err_roll_deg", "err_pitch_deg", "err_yaw_deg"]
        rows = np.column_stack([self.times, self.position_errors, np.degrees(self.rotation_errors)])
        return header, rows


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{v:.9g}"


def interpolate_pose(times: np.ndarray, poses: Sequence[Pose], t: float) -> Pose:
    """Linear interpolation of translation, slerp of rotation."""
    i = int(np.searchsorted(times, t, side="right")) - 1
    i = min(max(i, 0), len(times) - 1)
    if i == len(times) - 1 or abs(times[i] - t) < 1e-9:
        return poses[i]
    if abs(times[i + 1] - t) < 1e-9:
        return poses[i + 1]
    a = (t - times[i]) / (times[i + 1] - times[i])
    p = (1 - a) * poses[i].translation + a * poses[i + 1].translation
    return Pose(p, slerp(poses[i].rotation, poses[i + 1].rotation, a))


def evaluate(
    est_times: Sequence[float], est_poses: Sequence[Pose], gt_times: Sequence[float], gt_poses: Sequence[Pose]
) -> EvaluationReport:
    et = np.asarray(est_times, dtype=float)
    gt = np.asarray(gt_times, dtype=float)
    if len(et) == 0 or len(gt) == 0:
        raise EvaluationError("empty trajectory")
    tol = 1e-6
    keep = (et >= gt[0] - tol) & (et <= gt[-1] + tol)
    if not np.any(keep):
        raise EvaluationError("estimate and ground truth do not overlap in time")
    idx = np.flatnonzero(keep)
    pe = np.zeros((len(idx), 3))
    re = np.zeros((len(idx), 3))
    for n, i in enumerate(idx):
        g = interpolate_pose(gt, gt_poses, et[i])
        pe[n] = est_poses[i].translation - g.translation
        re[n] = rotation_error(est_poses[i].rotation, g.rotation)

    t0, t1 = et[idx[0]], et[idx[-1]]
    inner = np.flatnonzero((gt > t0 + tol) & (gt < t1 - tol))
    path = [interpolate_pose(gt, gt_poses, t0).translation]
    path += [gt_poses[i].translation for i in inner]
    path.append(interpolate_pose(gt, gt_poses, t1).translation)
    dist = float(np.sum(np.linalg.norm(np.diff(np.array(path), axis=0), axis=1)))

    final = float(np.linalg.norm(pe[-1]))
    final_yaw = math.degrees(abs(re[-1, 2]))
    if dist > 1e-12:
        trans_drift = 100.0 * final / dist
        rot_drift = final_yaw / dist
    else:
        trans_drift = 0.0 if final == 0 else math.inf
        rot_drift = 0.0 if final_yaw == 0 else math.inf
    return EvaluationReport(et[idx], pe, re, dist, trans_drift, rot_drift)
