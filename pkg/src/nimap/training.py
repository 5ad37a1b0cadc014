"""Desk-scale codec training on analytic primitives.

Each training example is one voxel cut from a densely sampled primitive:
the samples of its doubled cube form the context that is encoded, and
points of its own cube with exact signed distances form the targets the
decoder is scored on (Gaussian negative log-likelihood).  Every iteration
draws a random context subset, conditional-neural-process style.
"""

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import primitives as prims
from .codec import (Codec, decoder_backward, decoder_forward, encoder_backward_padded,
                    encoder_forward_padded, SIGMA_MIN)
from .errors import TrainingError
from .geometry import random_rotation
from .voxelmap import GridSpec, MIN_POINTS, voxelize

log = logging.getLogger(__name__)


def gaussian_nll(mu, sigma, d_true):
    """Batch mean of ``log(sigma) + (d - mu)^2 / (2 sigma^2)``."""
    mu, sigma, d_true = (np.asarray(a, float) for a in (mu, sigma, d_true))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    return float(np.mean(np.log(sigma) + (d_true - mu) ** 2 / (2 * sigma**2)))


def gaussian_nll_grad(mu, sigma, d_true):
    """Gradients of :func:`gaussian_nll` with respect to ``mu`` and ``sigma``."""
    n = np.size(mu)
    r = d_true - mu
    return -r / sigma**2 / n, (1.0 / sigma - r**2 / sigma**3) / n


@dataclass
class TrainerConfig:
    kinds: tuple = ("sphere", "box", "plane", "union")
    shapes: int = 240
    heldout_shapes: int = 40
    voxels_per_shape: int = 48
    iterations: int = 3000
    batch_voxels: int = 48
    max_context: int = 48
    queries_per_voxel: int = 48
    query_pool: int = 96
    learning_rate: float = 1e-3
    final_lr_fraction: float = 0.1
    density: tuple = (1500.0, 6000.0)   # samples per square meter
    context_fraction: tuple = (0.5, 1.0)
    voxel_size: float = 0.1
    min_points: int = MIN_POINTS
    grad_clip: float = 10.0
    seed: int = 0
    log_every: int = 200

    def as_dict(self):
        return asdict(self)


@dataclass
class VoxelBatch:
    """Padded per-voxel training data."""

    rel: np.ndarray       # (V, N, 3) sample positions minus voxel center
    normals: np.ndarray   # (V, N, 3)
    count: np.ndarray     # (V,) valid samples per row
    queries: np.ndarray   # (V, Q, 3) voxel-local query offsets
    sdf: np.ndarray       # (V, Q)

    def __len__(self):
        return len(self.count)

    def mask(self):
        return (np.arange(self.rel.shape[1])[None, :] < self.count[:, None]).astype(float)

    def take(self, rows):
        return VoxelBatch(self.rel[rows], self.normals[rows], self.count[rows],
                          self.queries[rows], self.sdf[rows])


def random_primitive(rng, kind):
    """Random primitive of the given kind, roughly within a 2 m box."""
    if kind == "sphere":
        r = float(np.exp(rng.uniform(np.log(0.12), np.log(1.2))))
        return prims.Sphere(tuple(rng.uniform(-0.3, 0.3, 3)), r)
    if kind == "box":
        h = tuple(rng.uniform(0.1, 0.7, 3))
        return prims.Box(tuple(rng.uniform(-0.3, 0.3, 3)), h, tuple(map(tuple, random_rotation(rng))))
    if kind == "plane":
        n = rng.normal(size=3)
        return prims.Plane(tuple(rng.uniform(-0.3, 0.3, 3)), tuple(n / np.linalg.norm(n)), 0.7)
    if kind == "union":
        flavor = rng.integers(3)
        R = random_rotation(rng)
        p = rng.uniform(-0.2, 0.2, 3)
        if flavor == 0:
            # two walls meeting at a concave edge
            angle = rng.uniform(np.radians(60), np.radians(120))
            na = R @ np.array([1.0, 0, 0])
            nb = R @ np.array([np.cos(angle), np.sin(angle), 0])
            return prims.Union(prims.Plane(tuple(p), tuple(na), 0.7), prims.Plane(tuple(p), tuple(nb), 0.7))
        if flavor == 1:
            # object resting on a floor
            n = R[:, 2]
            box = random_primitive(rng, "box")
            box = prims.Box(tuple(p + n * min(box.half_extents) * 0.8), box.half_extents, box.rotation)
            return prims.Union(prims.Plane(tuple(p), tuple(n), 0.9), box)
        a = random_primitive(rng, rng.choice(["sphere", "box"]))
        b = random_primitive(rng, rng.choice(["sphere", "box"]))
        return prims.Union(a, b)
    raise ValueError(f"unknown primitive kind {kind!r}")


def _planes(prim):
    if isinstance(prim, prims.Plane):
        return [prim]
    if isinstance(prim, prims.Union):
        return _planes(prim.a) + _planes(prim.b)
    return []


def primitive_voxels(prim, rng, cfg, max_voxels=None):
    """Cut training voxels out of a densely sampled primitive."""
    s = cfg.voxel_size
    density = rng.uniform(*cfg.density)
    count = int(density * prim.area())
    points, normals = prim.sample_surface(count, rng)
    grid = GridSpec(s, tuple(rng.uniform(0, s, 3)))
    vox = voxelize(points, grid, cfg.min_points)
    centers = vox.centers()
    ok = np.ones(len(vox), bool)
    for plane in _planes(prim):
        # keep voxels whose doubled cube lies inside the sampled patch
        ok &= plane.patch_distance(centers) < plane.half_size - 2 * s
    rows = np.nonzero(ok)[0]
    if max_voxels is not None and len(rows) > max_voxels:
        rows = rng.choice(rows, max_voxels, replace=False)
    bounds = np.searchsorted(vox.pair_voxel, np.arange(len(vox) + 1))
    N, Q = cfg.max_context, cfg.query_pool
    V = len(rows)
    rel = np.zeros((V, N, 3))
    nrm = np.zeros((V, N, 3))
    cnt = np.zeros(V, np.int64)
    qs = np.zeros((V, Q, 3))
    for i, row in enumerate(rows):
        members = vox.pair_point[bounds[row]:bounds[row + 1]]
        if len(members) > N:
            members = rng.choice(members, N, replace=False)
        cnt[i] = len(members)
        rel[i, :cnt[i]] = points[members] - centers[row]
        nrm[i, :cnt[i]] = normals[members]
        own = points[members][np.all(np.abs(points[members] - centers[row]) <= s / 2, axis=1)] - centers[row]
        n_near = Q // 2
        if len(own):
            near = own[rng.integers(len(own), size=n_near)] + rng.normal(scale=0.1 * s, size=(n_near, 3))
        else:
            near = rng.uniform(-s / 2, s / 2, (n_near, 3))
        qs[i, :n_near] = np.clip(near, -s / 2, s / 2)
        qs[i, n_near:] = rng.uniform(-s / 2, s / 2, (Q - n_near, 3))
    sdf = prim.sdf((qs + centers[rows][:, None, :]).reshape(-1, 3)).reshape(V, Q) if V else np.zeros((0, Q))
    return VoxelBatch(rel, nrm, cnt, qs, sdf)


def make_dataset(cfg, shapes, seed):
    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(shapes):
        prim = random_primitive(rng, cfg.kinds[rng.integers(len(cfg.kinds))])
        batch = primitive_voxels(prim, rng, cfg, cfg.voxels_per_shape)
        if len(batch):
            parts.append(batch)
    return VoxelBatch(*(np.concatenate([getattr(p, f) for p in parts])
                        for f in ("rel", "normals", "count", "queries", "sdf")))


def dataset_from_primitive(prim, cfg, seed, max_voxels=None):
    """Voxels of one given primitive, e.g. for held-out evaluation."""
    return primitive_voxels(prims.make_primitive(prim), np.random.default_rng(seed), cfg, max_voxels)


def evaluate(codec, data, chunk=512):
    """Held-out Gaussian NLL, mean squared and mean absolute error of ``mu``."""
    nll, sq, ab, n = 0.0, 0.0, 0.0, 0
    for start in range(0, len(data), chunk):
        b = data.take(slice(start, start + chunk))
        F, _ = encoder_forward_padded(codec.encoder, b.rel, b.normals, b.mask())
        mu, sigma = decoder_forward(codec.decoder, F, b.queries)
        m = mu.size
        nll += gaussian_nll(mu, sigma, b.sdf) * m
        sq += float(np.sum((mu - b.sdf) ** 2))
        ab += float(np.sum(np.abs(mu - b.sdf)))
        n += m
    return {"nll": nll / n, "mse": sq / n, "mae": ab / n}


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            self.params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def loss_and_grads(codec, batch, mask):
    """Training loss on one batch with gradients for every parameter."""
    F, ecache = encoder_forward_padded(codec.encoder, batch.rel, batch.normals, mask)
    mu, sigma, dcache = decoder_forward(codec.decoder, F, batch.queries, keep_cache=True)
    loss = gaussian_nll(mu, sigma, batch.sdf)
    g_mu, g_sigma = gaussian_nll_grad(mu, sigma, batch.sdf)
    dgrads, gF = decoder_backward(codec.decoder, dcache, g_mu, g_sigma)
    egrads = encoder_backward_padded(codec.encoder, ecache, gF)
    return loss, egrads, dgrads


def _context_mask(batch, rng, fraction):
    N = batch.rel.shape[1]
    keep_frac = rng.uniform(*fraction, size=len(batch))
    want = np.maximum(1, np.round(batch.count * keep_frac)).astype(int)
    # random subset of each row's valid samples: rank valid slots by a random key
    key = rng.random((len(batch), N))
    key[np.arange(N)[None, :] >= batch.count[:, None]] = np.inf
    rank = np.argsort(np.argsort(key, axis=1), axis=1)
    return (rank < want[:, None]).astype(float)


@dataclass
class TrainingResult:
    codec: Codec
    history: list = field(default_factory=list)
    initial: dict = None
    final: dict = None
    seconds: float = 0.0


def train_codec(cfg=None, progress=None, train=None, heldout=None):
    """Train a codec from scratch; deterministic for a fixed ``cfg.seed``.

    ``train`` and ``heldout`` replace the generated primitive datasets.
    """
    cfg = cfg or TrainerConfig()
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    codec = Codec.initialize(cfg.seed, cfg.voxel_size)
    if train is None:
        train = make_dataset(cfg, cfg.shapes, cfg.seed + 1000)
    if heldout is None:
        heldout = make_dataset(cfg, cfg.heldout_shapes, cfg.seed + 2000)
    initial = evaluate(codec, heldout)
    log.info("training on %d voxels, held-out %d, initial %s", len(train), len(heldout), initial)
    enc, dec = codec.encoder.layers, codec.decoder.layers
    opt_e, opt_d = Adam(enc, cfg.learning_rate), Adam(dec, cfg.learning_rate)
    history = []
    for it in range(cfg.iterations):
        frac = it / max(1, cfg.iterations - 1)
        lr = cfg.learning_rate * (cfg.final_lr_fraction + (1 - cfg.final_lr_fraction) * 0.5 * (1 + np.cos(np.pi * frac)))
        rows = rng.integers(len(train), size=cfg.batch_voxels)
        batch = train.take(rows)
        qsel = rng.integers(batch.queries.shape[1], size=(len(batch), cfg.queries_per_voxel))
        batch = VoxelBatch(batch.rel, batch.normals, batch.count,
                           np.take_along_axis(batch.queries, qsel[..., None], axis=1),
                           np.take_along_axis(batch.sdf, qsel, axis=1))
        mask = _context_mask(batch, rng, cfg.context_fraction)
        loss, ge, gd = loss_and_grads(codec, batch, mask)
        if not np.isfinite(loss):
            raise TrainingError("loss is not finite", it)
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in list(ge.values()) + list(gd.values())))
        if cfg.grad_clip and norm > cfg.grad_clip:
            ge = {k: g * (cfg.grad_clip / norm) for k, g in ge.items()}
            gd = {k: g * (cfg.grad_clip / norm) for k, g in gd.items()}
        opt_e.step(ge, lr)
        opt_d.step(gd, lr)
        history.append(loss)
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            log.info("iter %d loss %.4f", it + 1, np.mean(history[-cfg.log_every:]))
            if progress:
                progress(it + 1, float(np.mean(history[-cfg.log_every:])))
    final = evaluate(codec, heldout)
    codec.meta = {"trainer": cfg.as_dict(), "initial": initial, "final": final}
    return TrainingResult(codec, history, initial, final, time.perf_counter() - t0)


__all__ = ["TrainerConfig", "train_codec", "gaussian_nll", "gaussian_nll_grad", "evaluate",
           "make_dataset", "dataset_from_primitive", "random_primitive", "Adam", "SIGMA_MIN"]
