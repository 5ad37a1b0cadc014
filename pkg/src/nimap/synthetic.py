"""A small synthetic room and sensor sequences over it.

The room is a 4 m x 4 m x 2.5 m box seen from inside (floor, four walls, no
ceiling) with a table-sized box and a ball standing on the floor.  A frame
is the set of surface samples within range and field of view of a sensor,
expressed in sensor coordinates; the sensor looks along its local +x axis.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import SE3Pose
from .primitives import Box, Sphere

ROOM_HALF = 2.0
ROOM_HEIGHT = 2.5
DENSITY = 4000.0


@dataclass(frozen=True)
class Rect:
    """Planar rectangle ``center + a*u + b*v``, ``|a| <= hu``, ``|b| <= hv``."""

    center: tuple
    u: tuple
    v: tuple
    hu: float
    hv: float

    @property
    def normal(self):
        return np.cross(self.u, self.v)

    def area(self):
        return 4 * self.hu * self.hv

    def sample_surface(self, count, rng):
        ab = rng.uniform(-1, 1, size=(count, 2)) * (self.hu, self.hv)
        pts = np.asarray(self.center) + ab[:, :1] * np.asarray(self.u) + ab[:, 1:] * np.asarray(self.v)
        return pts, np.broadcast_to(self.normal, pts.shape).copy()


def _wall(center, inward):
    n = np.asarray(inward, float)
    v = np.array([0.0, 0.0, 1.0])
    u = np.cross(v, n)
    return Rect(tuple(center), tuple(u), tuple(v), ROOM_HALF, ROOM_HEIGHT / 2)


@dataclass
class Room:
    surfaces: list = field(default_factory=list)

    @classmethod
    def default(cls):
        h, z = ROOM_HALF, ROOM_HEIGHT / 2
        return cls([
            Rect((0, 0, 0), (1, 0, 0), (0, 1, 0), h, h),
            _wall((h, 0, z), (-1, 0, 0)),
            _wall((-h, 0, z), (1, 0, 0)),
            _wall((0, h, z), (0, -1, 0)),
            _wall((0, -h, z), (0, 1, 0)),
            Box((0.7, -0.5, 0.375), (0.4, 0.3, 0.375)),
            Sphere((-0.6, 0.6, 0.35), 0.35),
        ])

    def area(self):
        return sum(self._visible_area(s) for s in self.surfaces)

    @staticmethod
    def _visible_area(s):
        if isinstance(s, Box):
            # the bottom face rests on the floor
            hx, hy, _ = s.half_extents
            return s.area() - 4 * hx * hy
        return s.area()

    def sample(self, density=DENSITY, seed=0):
        """Area-uniform surface samples with outward (room-facing) normals."""
        rng = np.random.default_rng(seed)
        pts, nrm = [], []
        for s in self.surfaces:
            n = rng.poisson(density * self._visible_area(s))
            p, q = s.sample_surface(n, rng)
            if isinstance(s, Box):
                keep = p[:, 2] > 1e-9
                p, q = p[keep], q[keep]
            pts.append(p)
            nrm.append(q)
        return np.concatenate(pts), np.concatenate(nrm)

    def distance(self, x):
        """Unsigned distance to the union of all surfaces."""
        x = np.asarray(x, float)
        best = np.full(x.shape[:-1], np.inf)
        for s in self.surfaces:
            if isinstance(s, Rect):
                d = x - s.center
                a = np.clip(d @ np.asarray(s.u), -s.hu, s.hu)
                b = np.clip(d @ np.asarray(s.v), -s.hv, s.hv)
                proj = np.asarray(s.center) + a[..., None] * np.asarray(s.u) + b[..., None] * np.asarray(s.v)
                best = np.minimum(best, np.linalg.norm(x - proj, axis=-1))
            else:
                best = np.minimum(best, np.abs(s.sdf(x)))
        return best


def look_pose(position, yaw, pitch=0.0):
    """Sensor pose at ``position`` looking along yaw/pitch (radians)."""
    return SE3Pose(Rotation.from_euler("ZY", [yaw, pitch]).as_matrix(), np.asarray(position, float))


def orbit_trajectory(count, radius=0.8, height=1.2, pitch=-0.35, turns=1.0, phase=0.0):
    """Sensor circling the room center while looking outward and slightly down."""
    poses = []
    for i in range(count):
        a = phase + 2 * np.pi * turns * i / count
        pos = (radius * np.cos(a), radius * np.sin(a), height)
        poses.append(look_pose(pos, a + 0.4, pitch))
    return poses


def capture(points, normals, pose, max_range=2.5, fov_deg=100.0):
    """World samples inside the sensor cone, mapped into sensor coordinates."""
    inv = pose.inverse()
    local = inv.apply(points)
    dist = np.linalg.norm(local, axis=1)
    cos_half = np.cos(np.radians(fov_deg) / 2)
    seen = (dist < max_range) & (local[:, 0] > cos_half * dist)
    return local[seen], inv.rotate(normals[seen])


@dataclass
class SyntheticSequence:
    room: Room
    poses: list
    frames: list          # (points, normals) in sensor coordinates

    def __len__(self):
        return len(self.frames)

    def world_points(self, i):
        p, n = self.frames[i]
        return self.poses[i].apply(p), self.poses[i].rotate(n)


def make_sequence(count=20, density=DENSITY, seed=0, max_range=2.5, fov_deg=100.0, **orbit):
    """Frames over the default room; every frame draws its own surface samples."""
    room = Room.default()
    poses = orbit_trajectory(count, **orbit)
    frames = []
    for i, pose in enumerate(poses):
        pts, nrm = room.sample(density, seed=seed * 100_003 + i)
        frames.append(capture(pts, nrm, pose, max_range, fov_deg))
    return SyntheticSequence(room, poses, frames)


def perturb_pose(pose, rng, angle=0.05, shift=0.05):
    """Compose ``pose`` with a random rotation of ``angle`` rad and shift of ``shift`` m."""
    axis = rng.normal(size=3)
    R = Rotation.from_rotvec(angle * axis / np.linalg.norm(axis)).as_matrix()
    d = rng.normal(size=3)
    d *= shift / np.linalg.norm(d)
    return SE3Pose(R, d) @ pose


def drifted_trajectory(poses, start, rng, angle=0.01, shift=0.02):
    """Accumulate a random drift onto every pose from index ``start`` on."""
    out = list(poses[:start])
    drift = SE3Pose.identity()
    for pose in poses[start:]:
        drift = perturb_pose(drift, rng, angle, shift)
        # drift applied about the true sensor position so errors stay local
        about = SE3Pose(np.eye(3), pose.t)
        out.append(about @ drift @ about.inverse() @ pose)
    return out
