"""Pinhole camera geometry: intrinsics, quaternion poses, trajectories.

Conventions used throughout the package:

* camera frame: x right, y down, z forward (pinhole looks along +z),
* poses are camera-to-world: ``x_world = R @ x_cam + tvec`` where ``tvec``
  is the camera origin in world coordinates,
* quaternions are (w, x, y, z), unit norm,
* pixel (row, col) samples the image plane at (col + 0.5, row + 0.5),
  projected via u = fx*X/Z + cx, v = fy*Y/Z + cy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.height < 1 or self.width < 1:
            raise ValueError("resolution must be at least 1x1")

    @classmethod
    def simple(cls, height: int, width: int, focal: float) -> "Intrinsics":
        return cls(focal, focal, width / 2.0, height / 2.0, height, width)


# -- quaternion helpers (w, x, y, z) ----------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) to rotation matrix/matrices. Accepts (4,) or (M, 4)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_slerp(q0: np.ndarray, q1: np.ndarray, alpha: float) -> np.ndarray:
    """Spherical interpolation between unit quaternions, shortest arc."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 1.0 - 1e-10:
        return quat_normalize(q0 + alpha * (q1 - q0))
    theta = np.arccos(min(dot, 1.0))
    s = np.sin(theta)
    return quat_normalize(
        (np.sin((1 - alpha) * theta) / s) * q0 + (np.sin(alpha * theta) / s) * q1
    )


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Camera-to-world rotation and origin for a camera at ``eye`` facing ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise ValueError("look_at target coincides with eye")
    z = z / nz
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:  # looking straight along up: pick any perpendicular
        up = np.array([1.0, 0.0, 0.0])
        x = np.cross(z, up)
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)  # columns are camera axes in world
    return R, eye


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    q: np.ndarray     # (4,) unit quaternion, camera-to-world rotation
    tvec: np.ndarray  # (3,) camera origin in world

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.q, dtype=np.float64))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "tvec", np.asarray(self.tvec, dtype=np.float64).copy())

    @classmethod
    def from_rt(cls, R: np.ndarray, tvec: np.ndarray) -> "Pose":
        return cls(rot_to_quat(R), tvec)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def world_to_cam(self) -> tuple[np.ndarray, np.ndarray]:
        """Returns (V, b) with x_cam = V @ x_world + b."""
        V = self.R.T
        return V, -V @ self.tvec


def interpolate_pose(p0: Pose, p1: Pose, alpha: float) -> Pose:
    """Slerp rotation, lerp translation."""
    return Pose(quat_slerp(p0.q, p1.q, alpha),
                (1 - alpha) * p0.tvec + alpha * p1.tvec)


class CameraTrajectory:
    """Intrinsics plus one camera-to-world pose per spike readout."""

    def __init__(self, intrinsics: Intrinsics, poses: list[Pose],
                 readout_period_us: float = 25.0, speed_scale: float = 1.0):
        if len(poses) < 1:
            raise ValueError("trajectory needs at least one pose")
        self.intrinsics = intrinsics
        self.poses = list(poses)
        self.readout_period_us = float(readout_period_us)
        self.speed_scale = float(speed_scale)

    def __len__(self) -> int:
        return len(self.poses)

    def pose_at(self, t: float) -> Pose:
        """Pose at a (possibly fractional) frame time, clamped to the ends."""
        n = len(self.poses)
        t = float(np.clip(t, 0.0, n - 1))
        lo = int(np.floor(t))
        if lo >= n - 1:
            return self.poses[n - 1]
        alpha = t - lo
        if alpha == 0.0:
            return self.poses[lo]
        return interpolate_pose(self.poses[lo], self.poses[lo + 1], alpha)

    # -- poses.json ----------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "intrinsics": {
                "fx": self.intrinsics.fx, "fy": self.intrinsics.fy,
                "cx": self.intrinsics.cx, "cy": self.intrinsics.cy,
                "height": self.intrinsics.height, "width": self.intrinsics.width,
            },
            "readout_period_us": self.readout_period_us,
            "poses": [
                {"t": i, "q": [float(v) for v in p.q], "tvec": [float(v) for v in p.tvec]}
                for i, p in enumerate(self.poses)
            ],
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=1)

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraTrajectory":
        intr = Intrinsics(
            fx=d["intrinsics"]["fx"], fy=d["intrinsics"]["fy"],
            cx=d["intrinsics"]["cx"], cy=d["intrinsics"]["cy"],
            height=d["intrinsics"]["height"], width=d["intrinsics"]["width"],
        )
        entries = sorted(d["poses"], key=lambda e: e["t"])
        poses = [Pose(np.array(e["q"]), np.array(e["tvec"])) for e in entries]
        return cls(intr, poses, readout_period_us=d.get("readout_period_us", 25.0))

    @classmethod
    def load(cls, path) -> "CameraTrajectory":
        with open(path) as f:
            return cls.from_json_dict(json.load(f))
