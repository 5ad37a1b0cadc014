"""Rigid transforms and rotation helpers."""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import PoseError

ORTHO_TOL = 1e-9


def check_rotation(R, tol=ORTHO_TOL):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise PoseError(f"rotation must be a finite 3x3 matrix, got shape {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > tol:
        raise PoseError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise PoseError("rotation has determinant != +1")
    return R


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform ``x -> R @ x + t`` (translation in meters)."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = check_rotation(self.R)
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise PoseError("translation must be a finite 3-vector")
        R = R.copy()
        t = t.copy()
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, t, q_xyzw):
        q = np.asarray(q_xyzw, dtype=np.float64)
        q = q / np.linalg.norm(q)
        return cls(Rotation.from_quat(q).as_matrix(), t)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def quaternion(self):
        """Unit quaternion in (x, y, z, w) order with w >= 0."""
        q = Rotation.from_matrix(self.R).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.t

    def rotate(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.R.T

    def inverse(self):
        return SE3Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other):
        return SE3Pose(self.R @ other.R, self.R @ other.t + self.t)

    def allclose(self, other, atol=1e-12):
        return np.allclose(self.R, other.R, atol=atol) and np.allclose(self.t, other.t, atol=atol)


def random_rotation(rng):
    """Haar-uniform rotation matrix drawn from ``rng``."""
    return Rotation.random(random_state=rng).as_matrix()


def axis_rotation(axis, quarter_turns):
    """Exact rotation by ``quarter_turns * 90`` degrees about a coordinate axis."""
    c = [1, 0, -1, 0][quarter_turns % 4]
    s = [0, 1, 0, -1][quarter_turns % 4]
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    R = np.eye(3)
    R[i, i] = c
    R[j, j] = c
    R[i, j] = -s
    R[j, i] = s
    return R


def rotation_about_point(R, point):
    """Pose rotating by ``R`` while keeping ``point`` fixed."""
    point = np.asarray(point, dtype=np.float64)
    return SE3Pose(R, point - R @ point)
