import numpy as np
import pytest

from nimap.errors import DimensionError, EmptyInputError, FormatError
from nimap.mesh import (SdfGrids, TriangleMesh, accuracy, completeness, extract_mesh, fuse_samples, local_offsets,
                        mean_nearest_distance, mesh_from_map, read_mesh, sample_sdf)
from nimap.voxelmap import GridSpec, ImplicitMap

G = GridSpec(0.1)


def analytic_grids(sdf, indices, r=8, sigma=0.01, grid=G):
    indices = np.asarray(indices, np.int64)
    pos = grid.center_of(indices)[:, None, None, None, :] + local_offsets(grid.voxel_size, r)[None]
    mu = sdf(pos)
    return SdfGrids(grid, indices, r, mu, np.full(mu.shape, sigma))


def shell_indices(radius, grid=G):
    n = int(np.ceil(radius / grid.voxel_size)) + 2
    idx = np.array(list(np.ndindex(2 * n, 2 * n, 2 * n))) - n
    d = np.linalg.norm(grid.center_of(idx), axis=1)
    return idx[np.abs(d - radius) < grid.voxel_size]


def square(z, half=0.1):
    v = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    return TriangleMesh(v, [[0, 1, 2], [0, 2, 3]])


def test_analytic_sphere_radii():
    grids = analytic_grids(lambda p: np.linalg.norm(p, axis=-1) - 0.4, shell_indices(0.4))
    mesh = extract_mesh(grids)
    assert len(mesh) > 1000
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.all(np.abs(r - 0.4) <= 0.02 * 0.4)
    assert abs(mesh.area() - 4 * np.pi * 0.4**2) <= 0.02 * 4 * np.pi * 0.4**2


def test_shared_face_samples_are_averaged():
    grids = analytic_grids(lambda p: p[..., 2] - 0.03, [[0, 0, 0], [1, 0, 0]], r=4)
    grids.mu[1] += 1.0
    lat, mu = fuse_samples(grids)
    assert len(lat) == 2 * 64 - 16
    shared = lat[:, 0] == 3
    assert np.allclose(mu[shared] - (lat[shared, 2] * 0.1 / 3 - 0.03), 0.5)


def test_all_uncertain_gives_empty_mesh():
    grids = analytic_grids(lambda p: p[..., 2], shell_indices(0.2), sigma=1.0)
    assert len(extract_mesh(grids)) == 0


def test_per_sample_sigma_gating_removes_region():
    grids = analytic_grids(lambda p: p[..., 2] - 0.01, [[i, j, 0] for i in range(4) for j in range(4)])
    full = extract_mesh(grids)
    grids.sigma[grids.indices[:, 0] >= 2] = 1.0
    half = extract_mesh(grids)
    assert 0 < len(half) < len(full)
    assert half.vertices[:, 0].max() <= 0.2 + 1e-12


def test_no_crossing_no_triangles():
    grids = analytic_grids(lambda p: np.ones(p.shape[:-1]), shell_indices(0.2))
    assert len(extract_mesh(grids)) == 0


def test_bad_arguments():
    with pytest.raises(DimensionError):
        SdfGrids(G, np.zeros((1, 3), np.int64), 1, np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)))
    grids = analytic_grids(lambda p: p[..., 2], [[0, 0, 0]], r=4)
    with pytest.raises(ValueError):
        extract_mesh(grids, sigma_threshold=0)


def test_mesh_from_map_and_determinism(random_codec, rng):
    assert len(mesh_from_map(ImplicitMap(G, 18), random_codec)) == 0
    idx = np.unique(rng.integers(-3, 3, size=(40, 3)), axis=0)
    m = ImplicitMap(G, 18, idx, rng.normal(size=(len(idx), 18, 3)), np.ones(len(idx)))
    g = sample_sdf(m, random_codec)
    assert g.mu.shape == (len(idx), 4, 4, 4) and np.all(g.sigma > 0)
    a = mesh_from_map(m, random_codec, sigma_threshold=1e9)
    b = mesh_from_map(m, random_codec, sigma_threshold=1e9)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)


# --- metrics --------------------------------------------------------------------------


def test_offset_planes_metrics():
    a, b = square(0.0), square(0.01)
    acc = accuracy(a.sample_points(10_000, seed=1), b.sample_points(10_000, seed=2))
    assert abs(acc - 0.01) <= 0.05 * 0.01
    comp = completeness(b.sample_points(10_000, seed=3), a.sample_points(10_000, seed=4))
    assert abs(comp - 0.01) <= 0.05 * 0.01


def test_metric_properties(rng):
    a, b = rng.normal(size=(2, 300, 3))
    assert mean_nearest_distance(a, a) == 0.0
    assert accuracy(a, b) >= 0 and completeness(a, b) >= 0
    # both measure from the first argument
    assert accuracy(a, b) == completeness(a, b) != accuracy(b, a)
    with pytest.raises(EmptyInputError):
        accuracy(np.zeros((0, 3)), b)
    with pytest.raises(EmptyInputError):
        TriangleMesh.empty().sample_points(10)


def test_sample_points_on_surface_and_seeded():
    m = square(0.25)
    p = m.sample_points(2000, seed=5)
    assert np.all(p[:, 2] == 0.25) and np.all(np.abs(p[:, :2]) <= 0.1 + 1e-15)
    assert np.array_equal(p, m.sample_points(2000, seed=5))


def test_mesh_validation():
    with pytest.raises(DimensionError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(DimensionError):
        TriangleMesh(np.full((3, 3), np.nan), [[0, 1, 2]])


@pytest.mark.parametrize("suffix", [".ply", ".obj"])
def test_write_read_roundtrip(tmp_path, suffix):
    grids = analytic_grids(lambda p: np.linalg.norm(p, axis=-1) - 0.2, shell_indices(0.2), r=4)
    mesh = extract_mesh(grids)
    path = tmp_path / f"m{suffix}"
    (mesh.write_ply if suffix == ".ply" else mesh.write_obj)(path)
    back = read_mesh(path)
    assert np.array_equal(back.faces, mesh.faces)
    assert np.allclose(back.vertices, mesh.vertices, rtol=1e-6, atol=1e-7)


def test_read_mesh_fan_triangulates_and_rejects(tmp_path):
    p = tmp_path / "quad.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n"
                 "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
                 "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    assert np.array_equal(read_mesh(p).faces, [[0, 1, 2], [0, 2, 3]])
    bad = tmp_path / "bad.ply"
    bad.write_text("not a mesh\n")
    with pytest.raises(FormatError):
        read_mesh(bad)
    short = tmp_path / "short.ply"
    short.write_text(p.read_text().rsplit("\n", 2)[0] + "\n")
    with pytest.raises(FormatError):
        read_mesh(short)
