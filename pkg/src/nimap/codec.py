"""Point-set encoder and SDF decoder.

The encoder has two vector-neuron branches with identical shape,

    VNLinear(1, 32) -> VNLeakyReLU -> VNLinear(32, 32) -> VNLeakyReLU -> VNLinear(32, 9)

one fed with the sample position relative to the voxel center, the other with
the sample normal.  The two ``9 x 3`` outputs are stacked into an ``18 x 3``
feature and mean-pooled over the samples of a voxel.  Rotating the samples
about the center rotates the feature; translating samples and center together
leaves it untouched.

The decoder first maps the feature to rotation-invariant quantities: a
``3 x 3`` frame ``T = W_f F`` is formed with a vector-neuron linear map, and
the feature and query are expressed in it (``F T^T`` and ``q T^T``).  Those
54 + 3 numbers plus ``|q|^2`` feed an MLP ``58 -> 128 -> 128 -> 128 -> 2``
whose outputs are the signed distance ``mu`` and the pre-activation of its
standard deviation ``sigma = softplus(s)``.  Decoding is therefore invariant
to rotating the feature and query together.
"""

from dataclasses import dataclass, field

import numpy as np

from . import vnn
from .errors import DimensionError, EmptyInputError

LATENT_ROWS = 9
HIDDEN = 32
DECODER_WIDTHS = (58, 128, 128, 128, 2)
SIGMA_MIN = 1e-4
LEAK = 0.01
BRANCHES = ("point", "normal")
# pairs per encoder chunk, bounds peak memory of the batched forward pass
CHUNK = 1 << 15


def encoder_layout(latent_rows=LATENT_ROWS, hidden=HIDDEN):
    layout = []
    for b in BRANCHES:
        layout += [
            (f"{b}.lin1", (hidden, 1)),
            (f"{b}.relu1.W", (hidden, hidden)),
            (f"{b}.relu1.U", (hidden, hidden)),
            (f"{b}.lin2", (hidden, hidden)),
            (f"{b}.relu2.W", (hidden, hidden)),
            (f"{b}.relu2.U", (hidden, hidden)),
            (f"{b}.lin3", (latent_rows, hidden)),
        ]
    return layout


def decoder_layout(latent_rows=LATENT_ROWS, widths=DECODER_WIDTHS):
    layout = [("frame", (3, 2 * latent_rows))]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layout.append((f"fc{i}.W", (b, a)))
        layout.append((f"fc{i}.b", (b,), a))
    return layout


@dataclass
class EncoderParams:
    layers: dict
    position_scale: float = 1.0  # positions are multiplied by this before the point branch

    @property
    def latent_rows(self):
        return self.layers["point.lin3"].shape[0]


@dataclass
class DecoderParams:
    layers: dict
    voxel_size: float = 0.1
    widths: tuple = DECODER_WIDTHS

    @property
    def n_layers(self):
        return len(self.widths) - 1


@dataclass
class Codec:
    encoder: EncoderParams
    decoder: DecoderParams
    voxel_size: float = 0.1
    meta: dict = field(default_factory=dict)

    @property
    def latent_rows(self):
        return self.encoder.latent_rows

    @classmethod
    def initialize(cls, seed=0, voxel_size=0.1, latent_rows=LATENT_ROWS):
        enc = vnn.init_weights(seed, encoder_layout(latent_rows))
        dec = vnn.init_weights(seed + 1, decoder_layout(latent_rows))
        return cls(
            EncoderParams(enc, 1.0 / voxel_size),
            DecoderParams(dec, voxel_size),
            voxel_size,
        )

    def parameters(self):
        """Flat ``{name: array}`` view, prefixed ``enc.`` / ``dec.``."""
        out = {f"enc.{k}": v for k, v in self.encoder.layers.items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.layers.items()})
        return out

    def copy(self):
        return Codec(
            EncoderParams({k: v.copy() for k, v in self.encoder.layers.items()},
                          self.encoder.position_scale),
            DecoderParams({k: v.copy() for k, v in self.decoder.layers.items()},
                          self.decoder.voxel_size, self.decoder.widths),
            self.voxel_size,
            dict(self.meta),
        )

    def encode_voxel(self, positions, normals, center):
        return encode_voxel(self.encoder, positions, normals, center)

    def decode(self, feature, queries):
        return decode_sdf(self.decoder, feature, queries)


# --- encoder ----------------------------------------------------------------


def _branch_forward(layers, prefix, x, keep_cache=False):
    """``x`` is ``(N, 3, 1)``; returns ``(N, 3, l)``."""
    L = layers
    caches = []
    h1 = vnn.linear_cl(L[f"{prefix}.lin1"], x)
    a1, c1 = vnn.relu_cl(L[f"{prefix}.relu1.W"], L[f"{prefix}.relu1.U"], h1)
    h2 = vnn.linear_cl(L[f"{prefix}.lin2"], a1)
    a2, c2 = vnn.relu_cl(L[f"{prefix}.relu2.W"], L[f"{prefix}.relu2.U"], h2)
    out = vnn.linear_cl(L[f"{prefix}.lin3"], a2)
    if keep_cache:
        caches = (x, c1, a1, c2, a2)
    return out, caches


def _branch_backward(layers, prefix, caches, grad_out):
    L = layers
    x, c1, a1, c2, a2 = caches
    g = {}
    g[f"{prefix}.lin3"], ga2 = vnn.linear_cl_backward(L[f"{prefix}.lin3"], a2, grad_out)
    gW, gU, gh2 = vnn.relu_cl_backward(L[f"{prefix}.relu2.W"], L[f"{prefix}.relu2.U"], c2, ga2)
    g[f"{prefix}.relu2.W"], g[f"{prefix}.relu2.U"] = gW, gU
    g[f"{prefix}.lin2"], ga1 = vnn.linear_cl_backward(L[f"{prefix}.lin2"], a1, gh2)
    gW, gU, gh1 = vnn.relu_cl_backward(L[f"{prefix}.relu1.W"], L[f"{prefix}.relu1.U"], c1, ga1)
    g[f"{prefix}.relu1.W"], g[f"{prefix}.relu1.U"] = gW, gU
    g[f"{prefix}.lin1"], _ = vnn.linear_cl_backward(L[f"{prefix}.lin1"], x, gh1)
    return g


def _branch(layers, prefix, vectors):
    """Per-vector branch output ``(N, l, 3)`` for ``(N, 3)`` inputs."""
    out, _ = _branch_forward(layers, prefix, vectors[:, :, None])
    return out.transpose(0, 2, 1)


def encode_point(enc, position, normal, center):
    """Single-sample feature, ``(2l, 3)``."""
    rel = (np.asarray(position, float) - np.asarray(center, float)) * enc.position_scale
    n = np.asarray(normal, float)
    fp = _branch(enc.layers, "point", rel.reshape(1, 3))[0]
    fn = _branch(enc.layers, "normal", n.reshape(1, 3))[0]
    return np.concatenate([fp, fn], axis=0)


def _segment_mean(values, segments, n_segments, counts):
    out = np.zeros((n_segments,) + values.shape[1:])
    np.add.at(out, segments, values)
    return out / counts.reshape((-1,) + (1,) * (values.ndim - 1))


def branch_gain(layers, prefix):
    """Per-row gain ``g`` with ``branch(v) = g[:, None] * v`` for one-channel inputs.

    With a single input vector every hidden channel stays parallel to it, so
    the sign test inside each VN-LeakyReLU does not depend on the input and
    the branch is exactly linear.  Returns ``None`` for wider inputs.
    """
    if layers[f"{prefix}.lin1"].shape[1] != 1:
        return None
    return _branch(layers, prefix, np.array([[1.0, 0.0, 0.0]]))[0, :, 0]


def pooled_branch(layers, prefix, vectors, segments, n_segments, chunk=CHUNK, method="auto"):
    """Mean of branch outputs per segment.

    ``vectors`` is ``(P, 3)``, ``segments`` ``(P,)`` integer ids in
    ``[0, n_segments)``.  Returns ``(n_segments, l, 3)``.  ``method="layers"``
    pushes every sample through the network; ``"auto"`` pools first and
    applies the branch gain when the branch is linear.
    """
    segments = np.asarray(segments)
    counts = np.bincount(segments, minlength=n_segments).astype(np.float64)
    if np.any(counts == 0):
        raise EmptyInputError("every voxel needs at least one sample")
    gain = branch_gain(layers, prefix) if method == "auto" else None
    if gain is not None:
        mean = np.stack([np.bincount(segments, vectors[:, a], n_segments) for a in range(3)], axis=1)
        return gain[None, :, None] * (mean / counts[:, None])[:, None, :]
    rows = layers[f"{prefix}.lin3"].shape[0]
    acc = np.zeros((n_segments, rows, 3))
    for start in range(0, len(vectors), chunk):
        sl = slice(start, start + chunk)
        out = _branch(layers, prefix, vectors[sl])
        np.add.at(acc, segments[sl], out)
    return acc / counts[:, None, None]


def encode_sets(enc, rel_positions, normals, segments, n_segments):
    """Mean-pooled features for many voxels at once.

    ``rel_positions`` are sample positions minus their voxel's center, in
    meters.  Returns ``(n_segments, 2l, 3)``.
    """
    fp = pooled_branch(enc.layers, "point", rel_positions * enc.position_scale,
                       segments, n_segments)
    fn = pooled_branch(enc.layers, "normal", normals, segments, n_segments)
    return np.concatenate([fp, fn], axis=1)


def encode_sets_jacobian(enc, rel_positions, normals, segments, n_segments, step=None):
    """:func:`encode_sets` plus forward-difference Jacobians.

    With ``step`` given, column ``p`` of each Jacobian is
    ``(phi(P + step * e_p) - phi(P)) / step`` in feature units per meter,
    giving an ``(n_segments, 2l, 3, 3)`` array whose last axis is the
    translation component.  Only the position branch depends on a shift.
    """
    scale = enc.position_scale
    fp = pooled_branch(enc.layers, "point", rel_positions * scale, segments, n_segments)
    fn = pooled_branch(enc.layers, "normal", normals, segments, n_segments)
    F = np.concatenate([fp, fn], axis=1)
    if step is None:
        return F, None
    if not step > 0:
        raise DimensionError("finite-difference step must be positive")
    J = np.zeros(F.shape + (3,))
    l = fp.shape[1]
    for p in range(3):
        shifted = rel_positions.copy()
        shifted[:, p] += step
        fp_s = pooled_branch(enc.layers, "point", shifted * scale, segments, n_segments)
        J[:, :l, :, p] = (fp_s - fp) / step
    return F, J


def encode_voxel(enc, positions, normals, center):
    """Feature of one voxel: the mean of :func:`encode_point` over its samples."""
    positions = np.asarray(positions, float).reshape(-1, 3)
    normals = np.asarray(normals, float).reshape(-1, 3)
    if len(positions) == 0:
        raise EmptyInputError("cannot encode an empty voxel")
    if normals.shape != positions.shape:
        raise DimensionError("positions and normals differ in shape")
    rel = positions - np.asarray(center, float)
    return encode_sets(enc, rel, normals, np.zeros(len(rel), int), 1)[0]


# --- decoder ----------------------------------------------------------------


def _leaky(x):
    return np.where(x > 0, x, LEAK * x)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decoder_forward(dec, F, q, keep_cache=False):
    """Batched decoder.

    ``F`` is ``(B, 2l, 3)``, ``q`` ``(B, Q, 3)`` voxel-local query offsets in
    meters.  Returns ``mu`` and ``sigma`` of shape ``(B, Q)`` (meters), plus a
    cache when requested.
    """
    L = dec.layers
    s = dec.voxel_size
    qn = q / s
    Wf = L["frame"]
    T = np.einsum("ac,bcd->bad", Wf, F)          # (B, 3, 3) frame rows
    Z = np.einsum("bcd,bad->bca", F, T)          # (B, 2l, 3)
    qz = np.einsum("bjd,bad->bja", qn, T)        # (B, Q, 3)
    qq = np.sum(qn * qn, axis=-1, keepdims=True)
    B, Qn = qn.shape[:2]
    nz = Z.shape[1] * 3
    W0 = L["fc0.W"]
    h = (Z.reshape(B, nz) @ W0[:, :nz].T)[:, None, :] + qz @ W0[:, nz:nz + 3].T \
        + qq * W0[:, nz + 3] + L["fc0.b"]
    pre = [h]
    acts = []
    a = _leaky(h)
    acts.append(a)
    for i in range(1, dec.n_layers):
        h = a @ L[f"fc{i}.W"].T + L[f"fc{i}.b"]
        if i < dec.n_layers - 1:
            pre.append(h)
            a = _leaky(h)
            acts.append(a)
    out = h
    mu = s * out[..., 0]
    sigma_raw = s * _softplus(out[..., 1])
    sigma = np.maximum(sigma_raw, SIGMA_MIN)
    if not keep_cache:
        return mu, sigma
    cache = dict(F=F, qn=qn, T=T, Z=Z, qz=qz, qq=qq, pre=pre, acts=acts,
                 out=out, clamped=sigma_raw < SIGMA_MIN)
    return mu, sigma, cache


def decoder_backward(dec, cache, grad_mu, grad_sigma):
    """Gradients of a scalar loss w.r.t. decoder parameters and the feature."""
    L = dec.layers
    s = dec.voxel_size
    out = cache["out"]
    g_out = np.empty_like(out)
    g_out[..., 0] = s * grad_mu
    g_out[..., 1] = np.where(cache["clamped"], 0.0,
                             s * grad_sigma * _sigmoid(out[..., 1]))
    grads = {}
    g = g_out
    n = dec.n_layers
    for i in range(n - 1, 0, -1):
        a = cache["acts"][i - 1]
        grads[f"fc{i}.W"] = np.einsum("bqo,bqi->oi", g, a)
        grads[f"fc{i}.b"] = g.sum(axis=(0, 1))
        g = g @ L[f"fc{i}.W"]
        g = g * np.where(cache["pre"][i - 1] > 0, 1.0, LEAK)
    # first layer, split into feature / query parts
    F, T, Z, qz, qq, qn = (cache[k] for k in ("F", "T", "Z", "qz", "qq", "qn"))
    B = F.shape[0]
    nz = Z.shape[1] * 3
    W0 = L["fc0.W"]
    gz_sum = g.sum(axis=1)                                   # (B, 128)
    gW0 = np.empty_like(W0)
    gW0[:, :nz] = gz_sum.T @ Z.reshape(B, nz)
    gW0[:, nz:nz + 3] = np.einsum("bqo,bqa->oa", g, qz)
    gW0[:, nz + 3] = np.einsum("bqo,bq->o", g, qq[..., 0])
    grads["fc0.W"] = gW0
    grads["fc0.b"] = g.sum(axis=(0, 1))
    gZ = (gz_sum @ W0[:, :nz]).reshape(Z.shape)             # (B, 2l, 3)
    gqz = g @ W0[:, nz:nz + 3]                               # (B, Q, 3)
    gT = np.einsum("bca,bcd->bad", gZ, F) + np.einsum("bja,bjd->bad", gqz, qn)
    gF = np.einsum("bca,bad->bcd", gZ, T) + np.einsum("ac,bad->bcd", L["frame"], gT)
    grads["frame"] = np.einsum("bad,bcd->ac", gT, F)
    return grads, gF


def decode_sdf(dec, feature, queries):
    """Decode ``(mu, sigma)`` at voxel-local query offsets (meters).

    ``feature`` is ``(2l, 3)``; ``queries`` is ``(3,)`` or ``(Q, 3)``.
    """
    feature = np.asarray(feature, float)
    q = np.asarray(queries, float)
    single = q.ndim == 1
    q = q.reshape(1, -1, 3)
    mu, sigma = decoder_forward(dec, feature[None], q)
    if single:
        return float(mu[0, 0]), float(sigma[0, 0])
    return mu[0], sigma[0]


def decode_batch(dec, features, queries, chunk=4096):
    """``features`` ``(B, 2l, 3)``, ``queries`` ``(B, Q, 3)`` -> ``(B, Q)`` pairs."""
    mus, sigmas = [], []
    for start in range(0, len(features), chunk):
        sl = slice(start, start + chunk)
        mu, sigma = decoder_forward(dec, features[sl], queries[sl])
        mus.append(mu)
        sigmas.append(sigma)
    if not mus:
        shape = (0, queries.shape[1])
        return np.zeros(shape), np.zeros(shape)
    return np.concatenate(mus), np.concatenate(sigmas)


# --- training helpers ---------------------------------------------------------


def encoder_forward_padded(enc, rel, normals, mask):
    """Training-time encoder on padded batches.

    ``rel`` and ``normals`` are ``(B, N, 3)`` and ``mask`` ``(B, N)`` (1 for
    real samples).  Returns ``(B, 2l, 3)`` features and a cache.
    """
    B, N, _ = rel.shape
    counts = mask.sum(axis=1)
    outs, caches = [], []
    for prefix, vec in (("point", rel * enc.position_scale), ("normal", normals)):
        o, c = _branch_forward(enc.layers, prefix, vec.reshape(B * N, 3, 1), keep_cache=True)
        o = o.reshape(B, N, 3, -1) * mask[:, :, None, None]
        outs.append(o.sum(axis=1) / counts[:, None, None])     # (B, 3, l)
        caches.append(c)
    F = np.concatenate(outs, axis=2).transpose(0, 2, 1)         # (B, 2l, 3)
    return F, (caches, mask, counts, (B, N))


def encoder_backward_padded(enc, cache, grad_F):
    caches, mask, counts, (B, N) = cache
    l = enc.latent_rows
    g_cl = grad_F.transpose(0, 2, 1)                            # (B, 3, 2l)
    grads = {}
    for i, prefix in enumerate(BRANCHES):
        g = g_cl[:, :, i * l:(i + 1) * l] / counts[:, None, None]
        g = np.broadcast_to(g[:, None], (B, N, 3, l)) * mask[:, :, None, None]
        grads.update(_branch_backward(enc.layers, prefix, caches[i], g.reshape(B * N, 3, l)))
    return grads
