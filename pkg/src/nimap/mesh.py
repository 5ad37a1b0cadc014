"""Surface extraction from latent maps and surface distance metrics."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .codec import decode_batch
from .errors import DimensionError, EmptyInputError
from .voxelmap import GridSpec, pack_keys, unpack_keys

SIGMA_THRESHOLD = 0.06
RESOLUTION = 4
METRIC_SAMPLES = 100_000


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DimensionError("face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise DimensionError("mesh has non-finite vertices")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64))

    def __len__(self):
        return len(self.faces)

    def triangle_areas(self):
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self):
        return float(self.triangle_areas().sum())

    def sample_points(self, count=METRIC_SAMPLES, seed=0):
        """Area-uniform random points on the surface."""
        areas = self.triangle_areas()
        if len(self.faces) == 0 or areas.sum() <= 0:
            raise EmptyInputError("cannot sample an empty mesh")
        rng = np.random.default_rng(seed)
        tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
        u, v = rng.random((2, count))
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        a, b, c = (self.vertices[self.faces[tri, i]] for i in range(3))
        return a + u[:, None] * (b - a) + v[:, None] * (c - a)

    def write_ply(self, path):
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(self.vertices)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write(f"element face {len(self.faces)}\n")
            fh.write("property list uchar int vertex_indices\nend_header\n")
            np.savetxt(fh, self.vertices, fmt="%.7g")
            np.savetxt(fh, np.hstack([np.full((len(self.faces), 1), 3), self.faces]), fmt="%d")

    def write_obj(self, path):
        with open(path, "w") as fh:
            np.savetxt(fh, self.vertices, fmt="v %.7g %.7g %.7g")
            np.savetxt(fh, self.faces + 1, fmt="f %d %d %d")


@dataclass
class SdfGrids:
    """Per-voxel ``r^3`` samples of ``(mu, sigma)``.

    Sample ``(a, b, c)`` of voxel ``i`` sits at
    ``center_i - s/2 + (a, b, c) * s / (r - 1)``, so neighboring voxels share
    their face samples.
    """

    grid: GridSpec
    indices: np.ndarray
    resolution: int
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.resolution < 2:
            raise DimensionError("resolution must be at least 2")
        shape = (len(self.indices),) + (self.resolution,) * 3
        if self.mu.shape != shape or self.sigma.shape != shape:
            raise DimensionError(f"sample arrays must have shape {shape}")

    def __len__(self):
        return len(self.indices)

    @property
    def spacing(self):
        return self.grid.voxel_size / (self.resolution - 1)

    def sample_positions(self):
        return self.grid.center_of(self.indices)[:, None, None, None, :] + local_offsets(
            self.grid.voxel_size, self.resolution)[None]


def local_offsets(voxel_size, resolution):
    t = np.linspace(-voxel_size / 2, voxel_size / 2, resolution)
    return np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1)


def sample_sdf(implicit_map, codec, resolution=RESOLUTION):
    """Decode every voxel on an ``r^3`` lattice spanning its cube."""
    r = int(resolution)
    offsets = local_offsets(implicit_map.voxel_size, r).reshape(-1, 3)
    n = len(implicit_map)
    queries = np.broadcast_to(offsets, (n, r**3, 3))
    mu, sigma = decode_batch(codec.decoder, implicit_map.features, queries)
    shape = (n, r, r, r)
    return SdfGrids(implicit_map.grid, implicit_map.indices.copy(), r, mu.reshape(shape), sigma.reshape(shape))


def fuse_samples(grids, sigma_threshold=SIGMA_THRESHOLD):
    """Merge per-voxel samples onto one shared lattice.

    Samples with ``sigma > sigma_threshold`` are dropped; a lattice point seen
    by several voxels takes the mean of their retained values.  Returns
    ``(lattice_indices (P, 3), mu (P,))``.
    """
    r = grids.resolution
    local = np.stack(np.meshgrid(*[np.arange(r)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    lattice = (grids.indices[:, None, :] * (r - 1) + local[None]).reshape(-1, 3)
    mu = grids.mu.reshape(-1)
    keep = grids.sigma.reshape(-1) <= sigma_threshold
    if not np.any(keep):
        return np.zeros((0, 3), np.int64), np.zeros(0)
    keys, inverse = np.unique(pack_keys(lattice[keep]), return_inverse=True)
    total = np.bincount(inverse, weights=mu[keep], minlength=len(keys))
    count = np.bincount(inverse, minlength=len(keys))
    return unpack_keys(keys), total / count


def extract_mesh(grids, sigma_threshold=SIGMA_THRESHOLD):
    """Marching cubes over the shared sample lattice.

    Only lattice cells whose eight corners are all observed produce
    triangles.  Vertices are placed by linear interpolation on cell edges.
    """
    if not sigma_threshold > 0:
        raise ValueError("sigma threshold must be positive")
    lat, mu = fuse_samples(grids, sigma_threshold)
    if len(lat) == 0:
        return TriangleMesh.empty()
    lo = lat.min(axis=0)
    shape = lat.max(axis=0) - lo + 1
    if np.any(shape < 2):
        return TriangleMesh.empty()
    vol = np.ones(tuple(shape))
    seen = np.zeros(tuple(shape), bool)
    rel = lat - lo
    vol[rel[:, 0], rel[:, 1], rel[:, 2]] = mu
    seen[rel[:, 0], rel[:, 1], rel[:, 2]] = True
    # unobserved samples get a positive fill; cells touching them are dropped below
    vol[~seen] = max(1.0, float(np.abs(mu).max()) + 1.0)
    cell_ok = np.ones(tuple(shape - 1), bool)
    for o in np.ndindex(2, 2, 2):
        cell_ok &= seen[o[0]:shape[0] - 1 + o[0], o[1]:shape[1] - 1 + o[1], o[2]:shape[2] - 1 + o[2]]
    if not cell_ok.any() or mu.min() > 0 or mu.max() < 0:
        return TriangleMesh.empty()
    try:
        verts, faces, _, _ = marching_cubes(vol, level=0.0, method="lorensen", allow_degenerate=False)
    except RuntimeError:
        return TriangleMesh.empty()
    centroid = verts[faces].mean(axis=1)
    cell = np.clip(np.floor(centroid).astype(np.int64), 0, shape - 2)
    faces = faces[cell_ok[cell[:, 0], cell[:, 1], cell[:, 2]]]
    if len(faces) == 0:
        return TriangleMesh.empty()
    used, faces = np.unique(faces.reshape(-1), return_inverse=True)
    h = grids.spacing
    vertices = np.asarray(grids.grid.origin) + h * (lo + verts[used])
    return TriangleMesh(vertices, faces.reshape(-1, 3))


def mesh_from_map(implicit_map, codec, resolution=RESOLUTION, sigma_threshold=SIGMA_THRESHOLD):
    if len(implicit_map) == 0:
        return TriangleMesh.empty()
    return extract_mesh(sample_sdf(implicit_map, codec, resolution), sigma_threshold)


def _points(x):
    if isinstance(x, TriangleMesh):
        x = x.sample_points()
    x = np.asarray(x, float).reshape(-1, 3)
    if len(x) == 0:
        raise EmptyInputError("metric needs non-empty point sets")
    return x


def mean_nearest_distance(query, target):
    """Mean over ``query`` points of the distance to the nearest ``target`` point."""
    q, t = _points(query), _points(target)
    d, _ = cKDTree(t).query(q)
    return float(d.mean())


def accuracy(recon, reference):
    """Mean distance from reconstruction samples to the reference."""
    return mean_nearest_distance(recon, reference)


def completeness(reference, recon):
    """Mean distance from reference samples to the reconstruction."""
    return mean_nearest_distance(reference, recon)


def read_mesh(path):
    """Read a triangle mesh from ascii PLY or OBJ (as written by :class:`TriangleMesh`)."""
    from .errors import FormatError
    text = open(path, encoding="utf-8", errors="replace").read()
    lines = text.splitlines()
    if str(path).lower().endswith(".obj"):
        v = [l.split()[1:4] for l in lines if l.startswith("v ")]
        f = [[int(t.split("/")[0]) - 1 for t in l.split()[1:4]] for l in lines if l.startswith("f ")]
        return TriangleMesh(np.asarray(v, float).reshape(-1, 3), np.asarray(f, np.int64).reshape(-1, 3))
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    counts, fmt, props = {}, None, []
    for i, line in enumerate(lines):
        tok = line.split()
        if tok[:1] == ["format"]:
            fmt = tok[1]
        elif tok[:1] == ["element"]:
            counts[tok[1]] = int(tok[2])
            props.append(tok[1])
        elif tok[:1] == ["end_header"]:
            body = lines[i + 1:]
            break
    else:
        raise FormatError(f"{path}: PLY header has no end_header")
    if fmt != "ascii" or props[:1] != ["vertex"]:
        raise FormatError(f"{path}: only ascii PLY meshes with vertices first are supported")
    nv, nf = counts.get("vertex", 0), counts.get("face", 0)
    if len(body) < nv + nf:
        raise FormatError(f"{path}: body is shorter than the header declares")
    verts = np.array([l.split()[:3] for l in body[:nv]], float).reshape(-1, 3)
    faces = []
    for l in body[nv:nv + nf]:
        tok = [int(t) for t in l.split()]
        # fan-triangulate polygons
        faces += [[tok[1], tok[j], tok[j + 1]] for j in range(2, tok[0])]
    return TriangleMesh(verts, np.asarray(faces, np.int64).reshape(-1, 3))
