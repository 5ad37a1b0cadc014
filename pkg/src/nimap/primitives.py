"""Analytic signed-distance primitives used as training data and test scenes.

Solids are negative inside.  Every primitive can evaluate its SDF, its
gradient (the outward normal on the surface) and draw area-uniform surface
samples.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def sdf(self, x):
        return np.linalg.norm(np.asarray(x, float) - self.center, axis=-1) - self.radius

    def gradient(self, x):
        return _unit(np.asarray(x, float) - self.center)

    def area(self):
        return 4 * np.pi * self.radius**2

    def sample_surface(self, count, rng):
        n = _unit(rng.normal(size=(count, 3)))
        return np.asarray(self.center) + self.radius * n, n


@dataclass(frozen=True)
class Plane:
    """Half-space ``(x - point) . normal <= 0``; sampled on a square patch."""

    point: tuple
    normal: tuple
    half_size: float = 1.0

    def _n(self):
        return _unit(np.asarray(self.normal, float))

    def sdf(self, x):
        return (np.asarray(x, float) - self.point) @ self._n()

    def gradient(self, x):
        x = np.asarray(x, float)
        return np.broadcast_to(self._n(), x.shape).copy()

    def area(self):
        return (2 * self.half_size) ** 2

    def tangents(self):
        n = self._n()
        a = np.eye(3)[np.argmin(np.abs(n))]
        u = _unit(np.cross(n, a))
        return u, np.cross(n, u)

    def sample_surface(self, count, rng):
        u, v = self.tangents()
        ab = rng.uniform(-self.half_size, self.half_size, size=(count, 2))
        pts = np.asarray(self.point, float) + ab[:, :1] * u + ab[:, 1:] * v
        return pts, np.broadcast_to(self._n(), pts.shape).copy()

    def patch_distance(self, x):
        """In-plane Chebyshev distance of the projection of ``x`` from the patch center."""
        u, v = self.tangents()
        d = np.asarray(x, float) - self.point
        return np.maximum(np.abs(d @ u), np.abs(d @ v))


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    rotation: tuple = None  # 3x3 box-to-world rotation, None for axis aligned

    def _R(self):
        return np.eye(3) if self.rotation is None else np.asarray(self.rotation, float)

    def _local(self, x):
        return (np.asarray(x, float) - self.center) @ self._R()

    def sdf(self, x):
        q = np.abs(self._local(x)) - np.asarray(self.half_extents, float)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def gradient(self, x):
        x = np.asarray(x, float)
        p = self._local(x.reshape(-1, 3))
        sign = np.where(p >= 0, 1.0, -1.0)
        q = np.abs(p) - np.asarray(self.half_extents, float)
        is_out = np.any(q > 0, axis=-1, keepdims=True)
        g_in = np.eye(3)[np.argmax(q, axis=-1)]
        g = np.where(is_out, np.maximum(q, 0.0), g_in) * sign
        return (_unit(g) @ self._R().T).reshape(x.shape)

    def area(self):
        a, b, c = (2 * np.asarray(self.half_extents, float))
        return 2 * (a * b + b * c + c * a)

    def sample_surface(self, count, rng):
        h = np.asarray(self.half_extents, float)
        face_area = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]] * 2)
        face = rng.choice(6, size=count, p=face_area / face_area.sum())
        p = rng.uniform(-1, 1, size=(count, 3)) * h
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        rows = np.arange(count)
        p[rows, axis] = sign * h[axis]
        n = np.zeros((count, 3))
        n[rows, axis] = sign
        R = self._R()
        return p @ R.T + self.center, n @ R.T


@dataclass(frozen=True)
class Union:
    a: object
    b: object

    def sdf(self, x):
        return np.minimum(self.a.sdf(x), self.b.sdf(x))

    def gradient(self, x):
        x = np.asarray(x, float)
        pick_a = (self.a.sdf(x) <= self.b.sdf(x))[..., None]
        return np.where(pick_a, self.a.gradient(x), self.b.gradient(x))

    def area(self):
        return self.a.area() + self.b.area()

    def sample_surface(self, count, rng):
        """Area-uniform samples of the union boundary (parts inside the other solid dropped)."""
        pts, nrm = [], []
        have = 0
        while have < count:
            m = max(2 * (count - have), 16)
            n_a = rng.binomial(m, self.a.area() / self.area())
            pa, na = self.a.sample_surface(n_a, rng)
            pb, nb = self.b.sample_surface(m - n_a, rng)
            keep_a = self.b.sdf(pa) >= 0
            keep_b = self.a.sdf(pb) >= 0
            p = np.concatenate([pa[keep_a], pb[keep_b]])
            n = np.concatenate([na[keep_a], nb[keep_b]])
            order = rng.permutation(len(p))
            pts.append(p[order])
            nrm.append(n[order])
            have += len(p)
        return np.concatenate(pts)[:count], np.concatenate(nrm)[:count]


PRIMITIVE_TYPES = ("sphere", "box", "plane", "union")


def make_primitive(spec):
    """Build a primitive from a dict spec (or return a primitive unchanged).

    ``{"type": "sphere", "center": ..., "radius": ...}``,
    ``{"type": "box", "center": ..., "half_extents": ..., "rotation": ...}``,
    ``{"type": "plane", "point": ..., "normal": ..., "half_size": ...}``,
    ``{"type": "union", "parts": [spec_a, spec_b]}``.
    """
    if isinstance(spec, (Sphere, Plane, Box, Union)):
        return spec
    if not isinstance(spec, dict) or spec.get("type") not in PRIMITIVE_TYPES:
        raise DimensionError(f"invalid primitive spec: {spec!r}")
    kind = spec["type"]
    try:
        if kind == "sphere":
            r = float(spec["radius"])
            if r <= 0:
                raise ValueError("radius must be positive")
            return Sphere(tuple(np.asarray(spec.get("center", (0, 0, 0)), float)), r)
        if kind == "plane":
            return Plane(tuple(np.asarray(spec.get("point", (0, 0, 0)), float)),
                         tuple(np.asarray(spec.get("normal", (0, 0, 1)), float)),
                         float(spec.get("half_size", 1.0)))
        if kind == "box":
            h = np.asarray(spec["half_extents"], float)
            if h.shape != (3,) or np.any(h <= 0):
                raise ValueError("half_extents must be three positive numbers")
            rot = spec.get("rotation")
            rot = None if rot is None else tuple(map(tuple, np.asarray(rot, float)))
            return Box(tuple(np.asarray(spec.get("center", (0, 0, 0)), float)), tuple(h), rot)
        parts = spec["parts"]
        if len(parts) != 2:
            raise ValueError("a union takes exactly two parts")
        return Union(make_primitive(parts[0]), make_primitive(parts[1]))
    except (KeyError, ValueError, TypeError) as exc:
        raise DimensionError(f"invalid {kind} spec: {exc}") from exc


def sample_primitive_sdf(shape, count, seed, query_spread=0.05):
    """Surface samples and SDF supervision pairs for one primitive.

    Returns ``(points, normals), (queries, sdf)``; queries are surface points
    jittered with Gaussian noise of scale ``query_spread`` (meters) and the
    SDF values are exact.
    """
    prim = make_primitive(shape)
    rng = np.random.default_rng(seed)
    points, normals = prim.sample_surface(count, rng)
    base, _ = prim.sample_surface(count, rng)
    queries = base + rng.normal(scale=query_spread, size=base.shape)
    return (points, normals), (queries, prim.sdf(queries))
