"""Sparse voxel grid of latent features.

Voxel ``(i, j, k)`` of a grid with size ``s`` and origin ``o`` covers the
half-open cube ``o + s * [i, i + 1) x [j, j + 1) x [k, k + 1)``; its center is
``o + s * ((i, j, k) + 0.5)``.  A voxel is encoded from every sample inside the
doubled cube of side ``2 s`` around its center, but only voxels holding at
least ``min_points`` samples in their own cube are kept, and the sample count
of the own cube becomes the voxel's observation weight.

Map file layout (little endian)::

    offset  size  field
    0       4     magic b"NIMM"
    4       4     u32 format version (1)
    8       4     u32 feature rows C (2l)
    12      4     u32 reserved, 0
    16      8     f64 voxel size
    24      24    f64[3] origin
    48      8     u64 voxel count N
    56      ...   N records: i32[3] index, f32 weight, f32[C, 3] feature (row major)
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import codec as _codec
from .errors import ConsistencyError, DimensionError, EmptyInputError, FormatError, GridMismatchError
from .geometry import SE3Pose

MIN_POINTS = 8
REMOVAL_EPS = 1e-6
MAP_MAGIC = b"NIMM"
MAP_VERSION = 1
_HEADER = struct.Struct("<4sIII d 3d Q")

_OFFSET = 1 << 20
_BITS = 21


def pack_keys(indices):
    """Pack ``(N, 3)`` integer indices into sortable int64 keys."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3) + _OFFSET
    if np.any(idx < 0) or np.any(idx >= (1 << _BITS)):
        raise DimensionError("voxel index out of the supported +-2^20 range")
    return (idx[:, 0] << (2 * _BITS)) | (idx[:, 1] << _BITS) | idx[:, 2]


def unpack_keys(keys):
    keys = np.asarray(keys, dtype=np.int64)
    mask = (1 << _BITS) - 1
    return np.stack([(keys >> (2 * _BITS)) & mask, (keys >> _BITS) & mask, keys & mask], axis=1) - _OFFSET


@dataclass(frozen=True)
class GridSpec:
    voxel_size: float = 0.1
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise DimensionError("voxel size must be positive")
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(v) for v in np.asarray(self.origin).reshape(3)))

    def index_of(self, points):
        return np.floor((np.asarray(points, float) - self.origin) / self.voxel_size).astype(np.int64)

    def center_of(self, indices):
        return np.asarray(self.origin) + self.voxel_size * (np.asarray(indices, float) + 0.5)


@dataclass
class PLIVox:
    center: np.ndarray
    feature: np.ndarray
    weight: float


class ImplicitMap:
    """Sparse voxel map holding ``(feature, weight)`` per integer index.

    Rows are kept sorted by packed key, so two maps built from the same
    content compare equal array-for-array.
    """

    def __init__(self, grid, channels=2 * _codec.LATENT_ROWS, indices=None, features=None, weights=None):
        self.grid = grid if isinstance(grid, GridSpec) else GridSpec(grid)
        self.channels = int(channels)
        if indices is None:
            indices = np.zeros((0, 3), np.int64)
            features = np.zeros((0, self.channels, 3))
            weights = np.zeros(0)
        indices = np.asarray(indices, np.int64).reshape(-1, 3)
        features = np.asarray(features, np.float64)
        weights = np.asarray(weights, np.float64).reshape(-1)
        if features.shape != (len(indices), self.channels, 3) or len(weights) != len(indices):
            raise DimensionError("indices, features and weights disagree in length or shape")
        keys = pack_keys(indices)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if len(keys) > 1 and np.any(keys[1:] == keys[:-1]):
            raise DimensionError("duplicate voxel indices")
        self.keys = keys
        self.indices = indices[order]
        self.features = features[order]
        self.weights = weights[order]

    @property
    def voxel_size(self):
        return self.grid.voxel_size

    @property
    def origin(self):
        return np.asarray(self.grid.origin)

    def __len__(self):
        return len(self.keys)

    def centers(self):
        return self.grid.center_of(self.indices)

    def lookup(self, indices):
        """Row of each index, -1 where absent."""
        return _find(self.keys, pack_keys(indices))

    def voxel(self, index):
        row = self.lookup(np.asarray(index).reshape(1, 3))[0]
        if row < 0:
            raise KeyError(tuple(index))
        return PLIVox(self.centers()[row], self.features[row].copy(), float(self.weights[row]))

    def __iter__(self):
        centers = self.centers()
        for i in range(len(self)):
            yield tuple(self.indices[i]), PLIVox(centers[i], self.features[i], float(self.weights[i]))

    def copy(self):
        return ImplicitMap(self.grid, self.channels, self.indices.copy(), self.features.copy(), self.weights.copy())

    def subset(self, rows):
        return ImplicitMap(self.grid, self.channels, self.indices[rows], self.features[rows], self.weights[rows])

    def max_difference(self, other):
        """Largest absolute feature / weight difference; inf if voxel sets differ."""
        if len(self) != len(other) or not np.array_equal(self.keys, other.keys):
            return np.inf
        if len(self) == 0:
            return 0.0
        return max(np.abs(self.features - other.features).max(), np.abs(self.weights - other.weights).max())

    def __repr__(self):
        return f"ImplicitMap(voxels={len(self)}, voxel_size={self.voxel_size}, origin={self.grid.origin})"


def _find(sorted_keys, keys):
    pos = np.searchsorted(sorted_keys, keys)
    pos_c = np.minimum(pos, max(len(sorted_keys) - 1, 0))
    hit = (pos < len(sorted_keys)) & (sorted_keys[pos_c] == keys) if len(sorted_keys) else np.zeros(len(keys), bool)
    return np.where(hit, pos_c, -1)


# --- voxelization -----------------------------------------------------------


@dataclass
class Voxelization:
    """Occupied voxels and, for each, the samples of its doubled cube.

    ``pair_voxel[i]`` / ``pair_point[i]`` list (voxel row, sample index)
    memberships, grouped by voxel row.
    """

    grid: GridSpec
    indices: np.ndarray
    counts: np.ndarray
    pair_voxel: np.ndarray
    pair_point: np.ndarray

    def __len__(self):
        return len(self.indices)

    def centers(self):
        return self.grid.center_of(self.indices)

    def as_dict(self):
        out = {}
        bounds = np.searchsorted(self.pair_voxel, np.arange(len(self) + 1))
        for row, idx in enumerate(self.indices):
            out[tuple(int(v) for v in idx)] = self.pair_point[bounds[row]:bounds[row + 1]]
        return out


def voxelize(points, grid, min_points=MIN_POINTS):
    """Group samples by voxel (see module docstring for the conventions)."""
    points = np.asarray(points, float).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise DimensionError("points must be finite")
    own = grid.index_of(points)
    keys, counts = np.unique(pack_keys(own), return_counts=True) if len(points) else (
        np.zeros(0, np.int64), np.zeros(0, np.int64))
    keep = counts >= min_points
    keys, counts = keys[keep], counts[keep]
    u = (points - grid.origin) / grid.voxel_size
    base = np.floor(u + 0.5).astype(np.int64)
    # the eight candidates depend only on the base cell, so look them up once per cell
    cells, inverse = np.unique(pack_keys(base), return_inverse=True)
    cells = unpack_keys(cells)
    inverse = inverse.reshape(-1)
    pair_v, pair_p = [], []
    for offset in np.ndindex(2, 2, 2):
        rows = _find(keys, pack_keys(cells - np.asarray(offset)))[inverse]
        hit = rows >= 0
        pair_v.append(rows[hit])
        pair_p.append(np.nonzero(hit)[0])
    pair_v = np.concatenate(pair_v)
    pair_p = np.concatenate(pair_p)
    order = np.argsort(pair_v * np.int64(max(len(points), 1)) + pair_p)
    return Voxelization(grid, unpack_keys(keys), counts.astype(np.float64), pair_v[order], pair_p[order])


# --- frame-local maps -----------------------------------------------------------


@dataclass
class FrameLocalMap:
    """A frame's map in its own coordinates plus what remapping needs.

    ``pose`` is the frame-to-world pose the frame is currently fused with and
    ``fused`` the interpolated map that was actually added to the global map
    (``None`` until the frame is fused).
    """

    frame_id: int
    pose: SE3Pose
    map: ImplicitMap
    jacobians: np.ndarray
    jacobian_step: float
    fused: ImplicitMap = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.jacobians.shape != (len(self.map), self.map.channels, 3, 3):
            raise DimensionError("one (C, 3, 3) Jacobian per voxel is required")


def encode_voxelization(codec, vox, points, normals, jacobian_step=None):
    """Features (and optionally finite-difference Jacobians) of every voxel."""
    centers = vox.centers()
    rel = points[vox.pair_point] - centers[vox.pair_voxel]
    nrm = normals[vox.pair_point]
    return _codec.encode_sets_jacobian(codec.encoder, rel, nrm, vox.pair_voxel, len(vox), jacobian_step)


def build_local_map(codec, points, normals, grid=None, frame_id=0, pose=None,
                    min_points=MIN_POINTS, jacobian_step=0.01):
    """Encode one frame into a :class:`FrameLocalMap` in frame coordinates."""
    grid = grid or GridSpec(codec.voxel_size)
    points = np.asarray(points, float).reshape(-1, 3)
    normals = np.asarray(normals, float).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyInputError(f"frame {frame_id} has no points")
    vox = voxelize(points, grid, min_points)
    if len(vox) == 0:
        raise EmptyInputError(f"frame {frame_id} has no voxel with >= {min_points} samples")
    F, J = encode_voxelization(codec, vox, points, normals, jacobian_step)
    local = ImplicitMap(grid, F.shape[1], vox.indices, F, vox.counts)
    # ImplicitMap sorts by key; voxelize already emits key order
    return FrameLocalMap(frame_id, pose or SE3Pose.identity(), local, J, jacobian_step)


def encode_map(codec, points, normals, grid=None, min_points=MIN_POINTS):
    """Encode points straight into an :class:`ImplicitMap` (no Jacobians)."""
    grid = grid or GridSpec(codec.voxel_size)
    points = np.asarray(points, float).reshape(-1, 3)
    normals = np.asarray(normals, float).reshape(-1, 3)
    vox = voxelize(points, grid, min_points)
    if len(vox) == 0:
        return ImplicitMap(grid, 2 * codec.latent_rows)
    F, _ = encode_voxelization(codec, vox, points, normals)
    return ImplicitMap(grid, F.shape[1], vox.indices, F, vox.counts)


# --- fusion algebra ----------------------------------------------------------------


def _check_compatible(a, b):
    if a.voxel_size != b.voxel_size or a.grid.origin != b.grid.origin:
        raise GridMismatchError(f"grids differ: {a.grid} vs {b.grid}")
    if a.channels != b.channels:
        raise GridMismatchError(f"feature rows differ: {a.channels} vs {b.channels}")


def fuse(global_map, local_map):
    """Weighted-mean fusion; returns a new map."""
    _check_compatible(global_map, local_map)
    keys = np.union1d(global_map.keys, local_map.keys)
    F = np.zeros((len(keys), global_map.channels, 3))
    w = np.zeros(len(keys))
    gi = np.searchsorted(keys, global_map.keys)
    li = np.searchsorted(keys, local_map.keys)
    F[gi] = global_map.features
    w[gi] = global_map.weights
    in_global = np.zeros(len(keys), bool)
    in_global[gi] = True
    shared = in_global[li]
    r = li[shared]
    wl = local_map.weights[shared]
    total = w[r] + wl
    safe = np.where(total > 0, total, 1.0)
    F[r] = np.where((total > 0)[:, None, None],
                    (F[r] * w[r, None, None] + local_map.features[shared] * wl[:, None, None]) / safe[:, None, None],
                    local_map.features[shared])
    w[r] = total
    F[li[~shared]] = local_map.features[~shared]
    w[li[~shared]] = local_map.weights[~shared]
    return ImplicitMap(global_map.grid, global_map.channels, unpack_keys(keys), F, w)


def remove(global_map, local_map):
    """Inverse of :func:`fuse`; voxels whose weight drops below 1e-6 are deleted."""
    _check_compatible(global_map, local_map)
    rows = _find(global_map.keys, local_map.keys)
    if np.any(rows < 0):
        missing = unpack_keys(local_map.keys[rows < 0][:1])[0]
        raise ConsistencyError(f"voxel {tuple(missing)} to remove is not in the global map")
    F = global_map.features.copy()
    w = global_map.weights.copy()
    new_w = w[rows] - local_map.weights
    if np.any(new_w < -REMOVAL_EPS):
        bad = int(np.argmin(new_w))
        raise ConsistencyError(
            f"voxel {tuple(local_map.indices[bad])}: removing weight {local_map.weights[bad]:.6g} "
            f"from {w[rows][bad]:.6g}")
    alive = new_w >= REMOVAL_EPS
    num = F[rows] * w[rows, None, None] - local_map.features * local_map.weights[:, None, None]
    F[rows[alive]] = num[alive] / new_w[alive, None, None]
    w[rows] = np.where(alive, new_w, 0.0)
    keep = np.ones(len(w), bool)
    keep[rows[~alive]] = False
    return ImplicitMap(global_map.grid, global_map.channels, global_map.indices[keep], F[keep], w[keep])


# --- serialization ---------------------------------------------------------------


def _record_dtype(channels):
    return np.dtype([("index", "<i4", (3,)), ("weight", "<f4"), ("feature", "<f4", (channels, 3))])


def serialize_map(m):
    header = _HEADER.pack(MAP_MAGIC, MAP_VERSION, m.channels, 0, m.voxel_size, *m.grid.origin, len(m))
    rec = np.zeros(len(m), _record_dtype(m.channels))
    rec["index"] = m.indices
    rec["weight"] = m.weights
    rec["feature"] = m.features
    return header + rec.tobytes()


def deserialize_map(data):
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise FormatError("map file truncated inside the header")
    magic, version, channels, _, voxel_size, ox, oy, oz, count = _HEADER.unpack_from(data)
    if magic != MAP_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != MAP_VERSION:
        raise FormatError(f"unsupported map format version {version}")
    if channels == 0 or not voxel_size > 0:
        raise FormatError("corrupt header")
    dtype = _record_dtype(channels)
    expected = _HEADER.size + count * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"map file has {len(data)} bytes, expected {expected}")
    rec = np.frombuffer(data, dtype, count=count, offset=_HEADER.size)
    return ImplicitMap(GridSpec(voxel_size, (ox, oy, oz)), channels, rec["index"].astype(np.int64),
                       rec["feature"].astype(np.float64), rec["weight"].astype(np.float64))


def save_map(m, path):
    with open(path, "wb") as fh:
        fh.write(serialize_map(m))


def load_map(path):
    with open(path, "rb") as fh:
        return deserialize_map(fh.read())


@dataclass
class MapStats:
    voxels: int
    total_weight: float
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    file_bytes: int

    def as_dict(self):
        return {"voxels": self.voxels, "total_weight": self.total_weight,
                "bbox_min": self.bbox_min.tolist(), "bbox_max": self.bbox_max.tolist(),
                "file_bytes": self.file_bytes}


def map_stats(m):
    """Voxel count, total weight, bounding box of voxel cubes, serialized size."""
    size = _HEADER.size + len(m) * _record_dtype(m.channels).itemsize
    if len(m) == 0:
        return MapStats(0, 0.0, np.zeros(3), np.zeros(3), size)
    lo = m.grid.center_of(m.indices.min(axis=0)) - m.voxel_size / 2
    hi = m.grid.center_of(m.indices.max(axis=0)) + m.voxel_size / 2
    return MapStats(len(m), float(m.weights.sum()), lo, hi, size)
