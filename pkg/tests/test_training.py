import numpy as np
import pytest

from nimap.codec import Codec, decoder_forward, encoder_forward_padded
from nimap.errors import TrainingError
from nimap.training import (TrainerConfig, VoxelBatch, dataset_from_primitive, evaluate, gaussian_nll,
                            gaussian_nll_grad, loss_and_grads, train_codec)

SPHERE = {"type": "sphere", "center": (0.0, 0.0, 0.0), "radius": 0.5}


def test_nll_examples():
    assert gaussian_nll(1.0, 1.0, 1.0) == 0.0
    assert gaussian_nll(2.0, 1.0, 1.0) == 0.5
    with pytest.raises(ValueError):
        gaussian_nll(0.0, 0.0, 0.0)


def test_nll_gradient_central_differences(rng):
    mu, sigma, d = rng.normal(size=5), rng.uniform(0.1, 2, 5), rng.normal(size=5)
    g_mu, g_sigma = gaussian_nll_grad(mu, sigma, d)
    h = 1e-6
    for i in range(5):
        e = np.eye(5)[i] * h
        num_mu = (gaussian_nll(mu + e, sigma, d) - gaussian_nll(mu - e, sigma, d)) / (2 * h)
        num_s = (gaussian_nll(mu, sigma + e, d) - gaussian_nll(mu, sigma - e, d)) / (2 * h)
        assert abs(num_mu - g_mu[i]) <= 1e-6 * max(abs(g_mu[i]), 1e-3)
        assert abs(num_s - g_sigma[i]) <= 1e-6 * max(abs(g_sigma[i]), 1e-3)


def small_batch(rng, V=3, N=6, Q=5):
    rel = rng.uniform(-0.1, 0.1, size=(V, N, 3))
    nrm = rng.normal(size=(V, N, 3))
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    count = np.array([N, N - 2, N - 3])[:V]
    q = rng.uniform(-0.05, 0.05, size=(V, Q, 3))
    return VoxelBatch(rel, nrm, count, q, rng.normal(scale=0.02, size=(V, Q)))


def test_backprop_matches_central_differences(rng):
    codec = Codec.initialize(5)
    batch = small_batch(rng)
    mask = batch.mask()
    loss, ge, gd = loss_and_grads(codec, batch, mask)
    h = 1e-5
    checked = 0
    for layers, grads in ((codec.encoder.layers, ge), (codec.decoder.layers, gd)):
        for name, g in grads.items():
            arr = layers[name]
            for flat in rng.choice(arr.size, size=min(3, arr.size), replace=False):
                idx = np.unravel_index(flat, arr.shape)
                orig = arr[idx]
                arr[idx] = orig + h
                up = loss_and_grads(codec, batch, mask)[0]
                arr[idx] = orig - h
                down = loss_and_grads(codec, batch, mask)[0]
                arr[idx] = orig
                num = (up - down) / (2 * h)
                # 1e-9 covers the finite-difference roundoff, |loss| * eps / h
                assert abs(num - g[idx]) <= 1e-4 * max(abs(num), abs(g[idx])) + 1e-9, name
                checked += 1
    assert checked > 20


def test_padded_encoder_matches_set_encoder(rng):
    from nimap.codec import encode_voxel
    codec = Codec.initialize(2)
    batch = small_batch(rng)
    F, _ = encoder_forward_padded(codec.encoder, batch.rel, batch.normals, batch.mask())
    for i in range(len(batch)):
        n = batch.count[i]
        ref = encode_voxel(codec.encoder, batch.rel[i, :n], batch.normals[i, :n], np.zeros(3))
        assert np.max(np.abs(F[i] - ref)) <= 1e-12


def test_training_is_deterministic():
    cfg = TrainerConfig(iterations=15, shapes=6, heldout_shapes=2, log_every=0, seed=3)
    a, b = train_codec(cfg), train_codec(cfg)
    pa, pb = a.codec.parameters(), b.codec.parameters()
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert a.history == b.history


def test_loss_decreases_on_fixed_sphere():
    cfg = TrainerConfig(iterations=100, log_every=0)
    data = dataset_from_primitive(SPHERE, cfg, seed=1)
    run = train_codec(cfg, train=data, heldout=data)
    blocks = np.asarray(run.history).reshape(10, 10).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)


def test_nan_data_raises_training_error():
    cfg = TrainerConfig(iterations=5, log_every=0)
    data = dataset_from_primitive(SPHERE, cfg, seed=1, max_voxels=8)
    data.sdf[:] = np.nan
    with pytest.raises(TrainingError) as info:
        train_codec(cfg, train=data, heldout=dataset_from_primitive(SPHERE, cfg, seed=2, max_voxels=8))
    assert info.value.iteration == 0


@pytest.mark.slow
def test_trained_codec_sphere_queries(trained_codec):
    cfg = TrainerConfig()
    heldout = dataset_from_primitive(SPHERE, cfg, seed=99)
    assert evaluate(trained_codec, heldout)["mae"] <= 0.01


@pytest.mark.slow
def test_trained_codec_surface_queries_near_zero(trained_codec):
    from nimap.codec import decode_batch
    from nimap.primitives import Sphere
    from nimap.voxelmap import encode_map
    sphere = Sphere((0.03, -0.02, 0.01), 0.5)
    rng = np.random.default_rng(3)
    m = encode_map(trained_codec, *sphere.sample_surface(int(4000 * sphere.area()), rng))
    q, _ = sphere.sample_surface(5000, rng)
    rows = m.lookup(m.grid.index_of(q))
    q, rows = q[rows >= 0], rows[rows >= 0]
    mu, sigma = decode_batch(trained_codec.decoder, m.features[rows], (q - m.centers()[rows])[:, None, :])
    assert np.max(np.abs(mu)) <= 0.01
    assert np.all(sigma > 0)


def test_untrained_codec_is_equivariant(rng):
    from nimap.codec import encode_voxel
    from nimap.geometry import random_rotation
    codec = Codec.initialize(11)
    P, N = rng.normal(size=(2, 20, 3))
    R = random_rotation(rng)
    diff = encode_voxel(codec.encoder, P @ R.T, N @ R.T, np.zeros(3)) - encode_voxel(codec.encoder, P, N, np.zeros(3)) @ R.T
    assert np.max(np.abs(diff)) <= 1e-10


def test_decoder_output_finite_for_trainer_shapes(rng):
    codec = Codec.initialize(0)
    mu, sigma = decoder_forward(codec.decoder, rng.normal(size=(2, 18, 3)), rng.normal(scale=0.05, size=(2, 4, 3)))
    assert np.all(np.isfinite(mu)) and np.all(sigma >= 1e-4)
