"""Vector-neuron layers.

A vector-neuron feature is a ``(C, 3)`` array: ``C`` channels, each a 3-vector.
A rotation ``R`` acts on it from the right, ``V -> V @ R.T``, and every layer
here commutes with that action.

The public functions take features in the ``(..., C, 3)`` layout.  The
``*_cl`` kernels work on channels-last ``(N, 3, C)`` batches and are what the
codec uses for training, since that layout turns every layer into one GEMM.
"""

import numpy as np

from .errors import DimensionError, EmptyInputError

# ||k|| below this is treated as a missing direction
DEGENERATE_DIRECTION = 1e-12


def _as_feature(v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim < 2 or v.shape[-1] != 3:
        raise DimensionError(f"expected a (..., C, 3) feature, got shape {v.shape}")
    if v.shape[-2] < 1:
        raise DimensionError("feature needs at least one channel")
    return v


def vn_linear(W, V):
    """Channel mixing ``W @ V``; ``W`` is ``(C_out, C_in)``."""
    W = np.asarray(W, dtype=np.float64)
    V = _as_feature(V)
    if W.ndim != 2 or W.shape[1] != V.shape[-2]:
        raise DimensionError(
            f"weight of shape {W.shape} cannot act on {V.shape[-2]} channels"
        )
    return np.matmul(W, V)


def vn_leaky_relu(weights, V):
    """Vector-neuron rectifier.

    For every output channel ``c`` a feature ``q_c = W_c V`` and a direction
    ``k_c = U_c V`` are formed.  ``q_c`` passes through unchanged when
    ``<q_c, k_c> >= 0``; otherwise its component along ``k_c`` is removed.
    A vanishing direction (``||k_c|| < 1e-12``) also passes ``q_c`` through.

    ``weights`` is a ``(W, U)`` pair of ``(C_out, C_in)`` matrices.
    """
    W, U = (np.asarray(a, dtype=np.float64) for a in weights)
    V = _as_feature(V)
    if W.shape != U.shape:
        raise DimensionError(f"W {W.shape} and U {U.shape} differ")
    q = vn_linear(W, V)
    k = vn_linear(U, V)
    return _project(q, k, axis=-1)


def _project(q, k, axis):
    dot = np.sum(q * k, axis=axis, keepdims=True)
    kk = np.sum(k * k, axis=axis, keepdims=True)
    cut = (dot < 0) & (kk >= DEGENERATE_DIRECTION**2)
    coef = np.where(cut, dot / np.where(cut, kk, 1.0), 0.0)
    return q - coef * k


def vn_mean_pool(features):
    """Element-wise mean of a non-empty sequence of same-shape features."""
    if len(features) == 0:
        raise EmptyInputError("cannot pool an empty list of features")
    try:
        stack = np.stack([_as_feature(f) for f in features])
    except ValueError as exc:
        raise DimensionError("features to pool must share one shape") from exc
    return stack.mean(axis=0)


def init_weights(seed, spec):
    """Deterministic uniform initialization.

    ``spec`` is a sequence of ``(name, shape)`` or ``(name, shape, fan_in)``;
    each array is drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` where
    ``fan_in`` defaults to ``shape[-1]``.  Returns a dict in spec order.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for entry in spec:
        name, shape = entry[0], tuple(int(s) for s in entry[1])
        fan_in = entry[2] if len(entry) > 2 else (shape[-1] if shape else 1)
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# --- channels-last kernels with explicit backward passes -------------------


def linear_cl(W, x):
    """``x`` is ``(N, 3, C_in)``; returns ``(N, 3, C_out)``."""
    n, d, c = x.shape
    return (x.reshape(n * d, c) @ W.T).reshape(n, d, W.shape[0])


def linear_cl_backward(W, x, grad_out):
    n, d, c = x.shape
    g2 = grad_out.reshape(n * d, -1)
    grad_W = g2.T @ x.reshape(n * d, c)
    grad_x = (g2 @ W).reshape(n, d, c)
    return grad_W, grad_x


def relu_cl(W, U, x):
    """Rectifier on ``(N, 3, C)``; returns output and a cache for backward."""
    q = linear_cl(W, x)
    k = linear_cl(U, x)
    dot = np.einsum("ndc,ndc->nc", q, k)
    kk = np.einsum("ndc,ndc->nc", k, k)
    cut = (dot < 0) & (kk >= DEGENERATE_DIRECTION**2)
    safe_kk = np.where(cut, kk, 1.0)
    coef = np.where(cut, dot / safe_kk, 0.0)
    out = q - coef[:, None, :] * k
    return out, (x, q, k, dot, safe_kk, cut)


def relu_cl_backward(W, U, cache, grad_out):
    x, q, k, dot, kk, cut = cache
    gk_dot = np.einsum("ndc,ndc->nc", grad_out, k)
    cutf = cut[:, None, :]
    grad_q = np.where(cutf, grad_out - (gk_dot / kk)[:, None, :] * k, grad_out)
    grad_k = np.where(
        cutf,
        -(q * gk_dot[:, None, :] + dot[:, None, :] * grad_out) / kk[:, None, :]
        + (2.0 * dot * gk_dot / kk**2)[:, None, :] * k,
        0.0,
    )
    gW, gx_q = linear_cl_backward(W, x, grad_q)
    gU, gx_k = linear_cl_backward(U, x, grad_k)
    return gW, gU, gx_q + gx_k
