import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nimap.errors import ConsistencyError, DimensionError, EmptyInputError, FormatError, GridMismatchError
from nimap.voxelmap import (GridSpec, ImplicitMap, build_local_map, deserialize_map, fuse, map_stats, pack_keys,
                            remove, serialize_map, unpack_keys, voxelize)

G = GridSpec(0.1)


def scalar_map(entries, grid=G):
    """One-row maps whose feature is a constant ``F``: ``{index: (F, w)}``."""
    idx = np.array(list(entries), np.int64).reshape(-1, 3)
    F = np.array([np.full((1, 3), f, float) for f, _ in entries.values()]).reshape(-1, 1, 3)
    w = np.array([w for _, w in entries.values()], float)
    return ImplicitMap(grid, 1, idx, F, w)


def random_map(rng, n=50, channels=18, span=6, integer_weights=False, grid=G):
    idx = np.unique(rng.integers(-span, span, size=(n, 3)), axis=0)
    F = rng.normal(size=(len(idx), channels, 3))
    w = rng.integers(1, 40, len(idx)).astype(float) if integer_weights else rng.uniform(0.5, 30, len(idx))
    return ImplicitMap(grid, channels, idx, F, w)


# --- keys and grid ----------------------------------------------------------------


def test_key_roundtrip(rng):
    idx = rng.integers(-(1 << 20), 1 << 20, size=(1000, 3))
    assert np.array_equal(unpack_keys(pack_keys(idx)), idx)
    with pytest.raises(DimensionError):
        pack_keys([[1 << 20, 0, 0]])


def test_keys_sort_lexicographically(rng):
    idx = rng.integers(-5, 5, size=(200, 3))
    by_key = idx[np.argsort(pack_keys(idx), kind="stable")]
    by_lex = idx[np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))]
    assert np.array_equal(by_key, by_lex)


def test_centers_exact():
    g = GridSpec(0.1, (1.0, -2.0, 0.5))
    idx = np.array([[0, 0, 0], [3, -4, 7]])
    expect = np.array([1.0, -2.0, 0.5]) + 0.1 * (idx + 0.5)
    assert np.array_equal(g.center_of(idx), expect)


def test_duplicate_indices_rejected():
    with pytest.raises(DimensionError):
        ImplicitMap(G, 1, [[0, 0, 0], [0, 0, 0]], np.zeros((2, 1, 3)), [1, 1])


# --- voxelization -----------------------------------------------------------------


def test_point_at_center_is_gathered_by_upper_neighbors():
    pts = np.repeat(G.center_of([[2, 3, 4]]), 8, axis=0)
    # make the eight gathering voxels occupied with filler points in their own cubes
    fill = G.center_of([[2 + a, 3 + b, 4 + c] for a, b, c in np.ndindex(2, 2, 2)] + [[1, 3, 4]])
    pts = np.concatenate([pts, np.repeat(fill, 8, axis=0)])
    vox = voxelize(pts, G, min_points=8).as_dict()
    gathers = {k for k, members in vox.items() if np.any(members < 8)}
    assert gathers == {(2 + a, 3 + b, 4 + c) for a, b, c in np.ndindex(2, 2, 2)}


def test_face_point_uses_lower_closed_convention():
    g = GridSpec(0.125)
    p = np.array([[0.25, 0.0625, 0.0625]])
    assert np.array_equal(g.index_of(p), [[2, 0, 0]])


def brute_force(points, grid, min_points):
    own = grid.index_of(points)
    uniq, counts = np.unique(own, axis=0, return_counts=True)
    out = {}
    for idx, cnt in zip(uniq, counts):
        if cnt < min_points:
            continue
        c = grid.center_of(idx)
        d = points - c
        inside = np.all((d >= -grid.voxel_size) & (d < grid.voxel_size), axis=1)
        out[tuple(idx)] = (cnt, np.nonzero(inside)[0])
    return out


def test_voxelize_matches_brute_force(rng):
    g = GridSpec(0.1, (0.013, -0.02, 0.07))
    pts = rng.uniform(-0.35, 0.35, size=(3000, 3))
    vox = voxelize(pts, g, 8)
    ref = brute_force(pts, g, 8)
    assert set(vox.as_dict()) == set(ref)
    for row, idx in enumerate(map(tuple, vox.indices)):
        assert vox.counts[row] == ref[idx][0]
        assert np.array_equal(np.sort(vox.as_dict()[idx]), ref[idx][1])


def test_own_cubes_partition_cloud(rng):
    pts = rng.normal(scale=0.4, size=(10_000, 3))
    vox = voxelize(pts, G, min_points=1)
    assert vox.counts.sum() == len(pts)
    own = G.index_of(pts)
    keys = pack_keys(own)
    assert set(np.unique(keys)) == set(pack_keys(vox.indices))


def test_voxelize_translation_covariant(rng):
    # dyadic values make the shift exact in floating point
    pts = rng.integers(0, 4096, size=(2000, 3)) / 4096
    g1 = GridSpec(0.125, (0.0, 0.0, 0.0))
    g2 = GridSpec(0.125, (2.5, -1.25, 0.375))
    a = voxelize(pts, g1, 4)
    b = voxelize(pts + np.array(g2.origin), g2, 4)
    assert np.array_equal(a.indices, b.indices)
    assert np.array_equal(a.pair_point, b.pair_point)


def test_non_finite_points_rejected():
    with pytest.raises(DimensionError):
        voxelize(np.array([[0, 0, np.nan]]), G)


# --- local maps --------------------------------------------------------------------


def sphere_points(rng, n=6000, r=0.4):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return r * d, d


def test_build_local_map(random_codec, rng):
    pts, nrm = sphere_points(rng)
    local = build_local_map(random_codec, pts, nrm, G)
    ref = brute_force(pts, G, 8)
    assert set(map(tuple, local.map.indices)) == set(ref)
    for idx, w in zip(map(tuple, local.map.indices), local.map.weights):
        assert w == ref[idx][0]
    assert local.jacobians.shape == (len(local.map), 18, 3, 3)
    again = build_local_map(random_codec, pts, nrm, G)
    assert np.array_equal(again.map.features, local.map.features)
    assert np.array_equal(again.jacobians, local.jacobians)


def test_build_local_map_empty(random_codec):
    with pytest.raises(EmptyInputError):
        build_local_map(random_codec, np.zeros((0, 3)), np.zeros((0, 3)), G)
    with pytest.raises(EmptyInputError):
        build_local_map(random_codec, np.zeros((3, 3)), np.ones((3, 3)), G)


# --- fusion algebra ---------------------------------------------------------------


def test_fuse_hand_case():
    out = fuse(scalar_map({(0, 0, 0): (2.0, 2.0)}), scalar_map({(0, 0, 0): (5.0, 1.0)}))
    assert np.all(out.features == 3.0) and out.weights[0] == 3.0


def test_remove_hand_case():
    out = remove(scalar_map({(0, 0, 0): (3.0, 3.0)}), scalar_map({(0, 0, 0): (5.0, 1.0)}))
    assert np.all(out.features == 2.0) and out.weights[0] == 2.0


def test_fuse_into_empty_and_disjoint_copy_verbatim(rng):
    L = random_map(rng)
    assert fuse(ImplicitMap(G), L).max_difference(L) == 0.0
    A = scalar_map({(0, 0, 0): (1.5, 2.0)})
    B = scalar_map({(5, 0, 0): (7.25, 3.0)})
    AB = fuse(A, B)
    assert len(AB) == 2
    assert np.array_equal(AB.features[AB.lookup([[0, 0, 0]])[0]], A.features[0])
    assert np.array_equal(AB.features[AB.lookup([[5, 0, 0]])[0]], B.features[0])


def test_self_fusion_doubles_weight(rng):
    L = random_map(rng)
    out = fuse(L, L)
    assert np.array_equal(out.weights, 2 * L.weights)
    assert np.max(np.abs(out.features - L.features)) <= 1e-15


def test_remove_full_weight_deletes_voxel():
    G1 = scalar_map({(0, 0, 0): (3.0, 3.0), (1, 0, 0): (1.0, 1.0)})
    out = remove(G1, scalar_map({(0, 0, 0): (3.0, 3.0)}))
    assert [tuple(i) for i in out.indices] == [(1, 0, 0)]


def test_remove_errors():
    g = scalar_map({(0, 0, 0): (3.0, 3.0)})
    with pytest.raises(ConsistencyError):
        remove(g, scalar_map({(1, 0, 0): (1.0, 1.0)}))
    with pytest.raises(ConsistencyError):
        remove(g, scalar_map({(0, 0, 0): (1.0, 4.0)}))


def test_grid_mismatch():
    a = scalar_map({(0, 0, 0): (1.0, 1.0)})
    with pytest.raises(GridMismatchError):
        fuse(a, scalar_map({(0, 0, 0): (1.0, 1.0)}, GridSpec(0.2)))
    with pytest.raises(GridMismatchError):
        fuse(a, scalar_map({(0, 0, 0): (1.0, 1.0)}, GridSpec(0.1, (0.05, 0, 0))))
    with pytest.raises(GridMismatchError):
        fuse(ImplicitMap(G, 18), a)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fuse_algebra_properties(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (random_map(rng, n=30, channels=2, span=4) for _ in range(3))
    ab, ba = fuse(A, B), fuse(B, A)
    assert ab.max_difference(ba) <= 1e-9
    assert fuse(ab, C).max_difference(fuse(A, fuse(B, C))) <= 1e-9
    assert remove(ab, B).max_difference(A) <= 1e-9
    assert remove(fuse(ab, C), C).max_difference(ab) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_weight_conservation_exact(seed):
    rng = np.random.default_rng(seed)
    A, B = (random_map(rng, n=40, channels=2, integer_weights=True) for _ in range(2))
    assert fuse(A, B).weights.sum() == A.weights.sum() + B.weights.sum()


# --- serialization ----------------------------------------------------------------


def test_serialize_roundtrip_float32(rng):
    m = random_map(rng, n=1000, span=20)
    data = serialize_map(m)
    assert len(data) == 56 + len(m) * (12 + 4 + 216)
    back = deserialize_map(data)
    assert np.array_equal(back.indices, m.indices)
    assert np.array_equal(back.features, m.features.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.weights, m.weights.astype(np.float32).astype(np.float64))
    assert serialize_map(back) == data


def test_serialize_empty_is_header_only():
    data = serialize_map(ImplicitMap(G))
    assert len(data) == 56
    assert len(deserialize_map(data)) == 0


@pytest.mark.parametrize("corrupt", ["magic", "version", "truncate", "extra", "channels"])
def test_corrupt_map_rejected(rng, corrupt):
    data = bytearray(serialize_map(random_map(rng, n=5)))
    if corrupt == "magic":
        data[:4] = b"XXXX"
    elif corrupt == "version":
        data[4] = 9
    elif corrupt == "truncate":
        data = data[:-3]
    elif corrupt == "extra":
        data += b"\0"
    else:
        data[8:12] = b"\0\0\0\0"
    with pytest.raises(FormatError):
        deserialize_map(bytes(data))


def test_map_stats(rng):
    assert map_stats(ImplicitMap(G)).voxels == 0
    one = scalar_map({(1, 2, 3): (1.0, 4.0)})
    s = map_stats(one)
    assert s.voxels == 1 and s.total_weight == 4.0
    assert np.allclose(s.bbox_min, [0.1, 0.2, 0.3]) and np.allclose(s.bbox_max, [0.2, 0.3, 0.4])
    m = random_map(rng)
    s = map_stats(m)
    assert s.voxels == len(np.unique(pack_keys(m.indices)))
    assert s.total_weight == pytest.approx(sum(w for w in m.weights))
    assert s.file_bytes == len(serialize_map(m))
