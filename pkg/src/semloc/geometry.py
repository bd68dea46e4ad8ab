"""Rigid-body helpers: SO(3) exponential/logarithm and a small SE(3) pose type.

Quaternions are stored scalar-last ``(qx, qy, qz, qw)``, the same order used in
the on-disk pose files.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

_EPS = 1e-10


def skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _EPS:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def so3_log(R):
    return Rotation.from_matrix(R).as_rotvec()


def so3_right_jacobian_inv(phi):
    """Inverse right Jacobian of SO(3) evaluated at the rotation vector ``phi``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    c = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + c * K @ K


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping points from a local frame into a parent frame."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        t = np.asarray(self.trans, dtype=float).reshape(3)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"quaternion is not unit length: {q}")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rt(cls, R, t):
        q = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
        return cls(q / np.linalg.norm(q), t)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @property
    def rotation(self):
        return Rotation.from_quat(self.quat).as_matrix()

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.trans
        return T

    def apply(self, points):
        """Transform a 3-vector or an ``(N, 3)`` array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.trans

    def inverse(self):
        R = self.rotation
        return Pose.from_rt(R.T, -R.T @ self.trans)

    def __matmul__(self, other: Pose) -> Pose:
        R = self.rotation
        return Pose.from_rt(R @ other.rotation, R @ other.trans + self.trans)

    def as_tuple(self):
        """``(tx, ty, tz, qx, qy, qz, qw)``, the pose-file field order."""
        return tuple(float(x) for x in np.concatenate([self.trans, self.quat]))


def pose_from_values(values, tol=1e-3):
    """Build a pose from ``tx ty tz qx qy qz qw``; quaternions within ``tol`` of unit are normalized."""
    values = np.asarray(values, dtype=float)
    if values.shape != (7,) or not np.all(np.isfinite(values)):
        raise ValueError(f"expected 7 finite pose values, got {values.tolist()}")
    q = values[3:]
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > tol:
        raise ValueError(f"quaternion norm {norm:.6f} is not unit")
    return Pose(q / norm, values[:3])


def look_rotation(yaw, pitch):
    """Camera-to-world rotation for a camera with +z forward, +x right, +y down.

    ``yaw`` is measured about world +z from the +x axis, ``pitch`` is positive upward.
    """
    cp, sp = np.cos(pitch), np.sin(pitch)
    forward = np.array([cp * np.cos(yaw), cp * np.sin(yaw), sp])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(forward, right)
    return np.column_stack([right, down, forward])
