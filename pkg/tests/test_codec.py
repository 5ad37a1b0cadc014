import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nimap.codec import (DECODER_WIDTHS, Codec, branch_gain, decode_batch, decode_sdf, decoder_forward,
                         encode_point, encode_sets, encode_voxel, pooled_branch)
from nimap.errors import DimensionError, EmptyInputError
from nimap.geometry import random_rotation
from nimap.primitives import Box, Plane, Sphere, Union, make_primitive, sample_primitive_sdf


def test_point_feature_shape(random_codec, rng):
    f = encode_point(random_codec.encoder, rng.normal(size=3), [0, 0, 1.0], np.zeros(3))
    assert f.shape == (18, 3)


def test_sample_at_center_gives_zero_point_rows(random_codec):
    c = np.array([0.35, -0.15, 0.05])
    f = encode_point(random_codec.encoder, c, [0, 1.0, 0], c)
    assert np.array_equal(f[:9], np.zeros((9, 3)))
    assert np.any(f[9:] != 0)


def test_point_encoding_equivariant(random_codec, rng):
    enc = random_codec.encoder
    c = rng.normal(size=3)
    p, n = c + 0.05 * rng.normal(size=3), rng.normal(size=3)
    R = random_rotation(rng)
    a = encode_point(enc, c + R @ (p - c), R @ n, c)
    b = encode_point(enc, p, n, c) @ R.T
    assert np.max(np.abs(a - b)) <= 1e-10


def test_single_sample_voxel_equals_point(random_codec, rng):
    enc = random_codec.encoder
    p, n, c = rng.normal(size=(3, 3))
    assert np.allclose(encode_voxel(enc, p[None], n[None], c), encode_point(enc, p, n, c), rtol=0, atol=1e-14)


def test_empty_voxel_rejected(random_codec):
    with pytest.raises(EmptyInputError):
        encode_voxel(random_codec.encoder, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(3))
    with pytest.raises(DimensionError):
        encode_voxel(random_codec.encoder, np.zeros((2, 3)), np.zeros((3, 3)), np.zeros(3))


def test_voxel_encoding_equivariant_64(random_codec, rng):
    enc = random_codec.encoder
    c = np.array([0.05, 0.15, -0.25])
    P = c + 0.1 * rng.uniform(-1, 1, size=(64, 3))
    N = rng.normal(size=(64, 3))
    R = random_rotation(rng)
    a = encode_voxel(enc, c + (P - c) @ R.T, N @ R.T, c)
    b = encode_voxel(enc, P, N, c) @ R.T
    assert np.max(np.abs(a - b)) <= 1e-10


def test_translation_leaves_feature_bit_identical(random_codec, rng):
    enc = random_codec.encoder
    # dyadic values keep p - c exact, so both calls see the same offsets
    rel = rng.integers(-50, 50, size=(20, 3)) / 1024
    N = rng.normal(size=(20, 3))
    c = np.array([0.25, 0.375, 0.5])
    shift = np.array([3.0, -2.0, 1.125])
    a = encode_voxel(enc, c + rel, N, c)
    b = encode_voxel(enc, c + shift + rel, N, c + shift)
    assert np.array_equal(a, b)


def test_permutation_invariance(random_codec, rng):
    enc = random_codec.encoder
    P, N = rng.normal(size=(2, 30, 3))
    perm = rng.permutation(30)
    assert np.max(np.abs(encode_voxel(enc, P, N, np.zeros(3)) - encode_voxel(enc, P[perm], N[perm], np.zeros(3)))) <= 1e-12


@pytest.mark.parametrize("prefix", ["point", "normal"])
def test_pooled_closed_form_matches_layers(random_codec, rng, prefix):
    layers = random_codec.encoder.layers
    v = rng.normal(size=(400, 3))
    seg = rng.integers(0, 25, 400)
    seg[:25] = np.arange(25)
    fast = pooled_branch(layers, prefix, v, seg, 25)
    slow = pooled_branch(layers, prefix, v, seg, 25, method="layers")
    assert np.max(np.abs(fast - slow)) <= 1e-13
    assert branch_gain(layers, prefix).shape == (9,)


def test_encode_sets_matches_voxel_loop(random_codec, rng):
    enc = random_codec.encoder
    rel, nrm = rng.normal(size=(2, 50, 3))
    seg = np.repeat(np.arange(5), 10)
    F = encode_sets(enc, rel, nrm, seg, 5)
    for i in range(5):
        ref = encode_voxel(enc, rel[seg == i], nrm[seg == i], np.zeros(3))
        assert np.max(np.abs(F[i] - ref)) <= 1e-13


def test_decoder_sigma_positive_and_shapes(random_codec, rng):
    F = rng.normal(size=(4, 18, 3))
    q = rng.uniform(-0.05, 0.05, size=(4, 7, 3))
    mu, sigma = decoder_forward(random_codec.decoder, F, q)
    assert mu.shape == sigma.shape == (4, 7)
    assert np.all(sigma > 0) and np.all(np.isfinite(mu))
    m1, s1 = decode_sdf(random_codec.decoder, F[0], q[0, 0])
    assert isinstance(m1, float) and s1 > 0
    mb, sb = decode_batch(random_codec.decoder, F, q)
    assert np.allclose(mb, mu) and np.allclose(sb, sigma)


def test_decoder_is_rotation_invariant(random_codec, rng):
    F = rng.normal(size=(1, 18, 3))
    q = rng.uniform(-0.05, 0.05, size=(1, 9, 3))
    R = random_rotation(rng)
    a = decoder_forward(random_codec.decoder, F, q)
    b = decoder_forward(random_codec.decoder, F @ R.T, q @ R.T)
    assert np.allclose(a[0], b[0], rtol=0, atol=1e-12) and np.allclose(a[1], b[1], rtol=0, atol=1e-12)


def test_decoder_widths():
    assert DECODER_WIDTHS[-1] == 2
    assert Codec.initialize(0).decoder.layers["fc0.W"].shape == (128, DECODER_WIDTHS[0])


# --- primitives ------------------------------------------------------------------


def test_sphere_and_plane_sdf():
    s = make_primitive({"type": "sphere", "center": (1, 2, 3), "radius": 0.5})
    assert np.isclose(s.sdf(np.array([1, 2, 4.5])), 1.0)
    p = make_primitive({"type": "plane", "point": (0, 0, 0), "normal": (0, 0, 1)})
    x = np.array([[0.3, -2.0, 0.7], [1, 1, -0.25]])
    assert np.allclose(p.sdf(x), x[:, 2])


def box_surface_grid(center, half, h=1e-3):
    """Every face of an axis-aligned box covered by a square lattice of pitch ``h``."""
    pts = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        gu = np.linspace(-half[u], half[u], int(np.ceil(2 * half[u] / h)) + 1)
        gv = np.linspace(-half[v], half[v], int(np.ceil(2 * half[v] / h)) + 1)
        U, V = (g.ravel() for g in np.meshgrid(gu, gv))
        for sign in (-1, 1):
            p = np.zeros((len(U), 3))
            p[:, u], p[:, v], p[:, axis] = U, V, sign * half[axis]
            pts.append(p)
    return np.concatenate(pts) + center


def test_box_sdf_matches_surface_sampling(rng):
    from scipy.spatial import cKDTree
    box = Box((0.1, -0.2, 0.3), (0.3, 0.2, 0.15), None)
    surf = box_surface_grid(np.asarray(box.center), box.half_extents)
    x = box.center + rng.uniform(-0.6, 0.6, size=(500, 3))
    d, _ = cKDTree(surf).query(x)
    assert np.max(np.abs(np.abs(box.sdf(x)) - d)) <= 1e-3


def test_rotated_box_gradient_is_unit_normal(rng):
    R = random_rotation(rng)
    box = Box((0, 0, 0), (0.3, 0.2, 0.1), tuple(map(tuple, R)))
    p, n = box.sample_surface(500, rng)
    assert np.allclose(box.sdf(p), 0, atol=1e-12)
    g = box.gradient(p + 1e-4 * n)
    assert np.allclose(g, n, atol=1e-6)


def test_union_samples_lie_on_union_boundary(rng):
    u = Union(Sphere((0, 0, 0), 0.5), Box((0.5, 0, 0), (0.3, 0.3, 0.3), None))
    p, n = u.sample_surface(2000, rng)
    assert len(p) == 2000
    assert np.allclose(u.sdf(p), 0, atol=1e-9)


def test_invalid_primitive_spec():
    for spec in [{"type": "cone"}, {"type": "sphere", "radius": -1}, {"type": "box", "half_extents": (1, 2)},
                 {"type": "union", "parts": [{"type": "sphere", "radius": 1}]}, "sphere"]:
        with pytest.raises(DimensionError):
            make_primitive(spec)


def test_sample_primitive_sdf_contract():
    (pts, nrm), (q, d) = sample_primitive_sdf({"type": "sphere", "radius": 0.4}, 500, seed=3)
    assert pts.shape == nrm.shape == q.shape == (500, 3)
    assert np.allclose(np.linalg.norm(pts, axis=1), 0.4)
    assert np.allclose(d, np.linalg.norm(q, axis=1) - 0.4)
    again = sample_primitive_sdf({"type": "sphere", "radius": 0.4}, 500, seed=3)
    assert np.array_equal(again[1][0], q)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_full_encoder_equivariance_property(seed):
    rng = np.random.default_rng(seed)
    codec = Codec.initialize(seed % 1000)
    c = rng.normal(size=3)
    P = c + 0.1 * rng.uniform(-1, 1, size=(16, 3))
    N = rng.normal(size=(16, 3))
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    R = random_rotation(rng)
    a = encode_voxel(codec.encoder, c + (P - c) @ R.T, N @ R.T, c)
    b = encode_voxel(codec.encoder, P, N, c) @ R.T
    assert np.max(np.abs(a - b)) <= 1e-10
