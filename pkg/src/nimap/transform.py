"""Rigid transformation of latent maps.

A frame's map is carried to a new pose in three moves:

1. every voxel center is transformed, ``c <- R c + t``;
2. every feature is rotated, ``F <- F R^T``, and so is its Jacobian, both on
   the feature side and on the translation side;
3. the moved voxels, which no longer sit on the target lattice, are
   interpolated onto it.  A target voxel ``n`` with at least one moved
   source closer than one voxel size takes its ``K`` nearest sources ``m``
   and receives

       F_n = sum_m s_nm (F_m + J_m (c_m - c_n)),   w_n = sum_m s_nm w_m

   with ``s_nm`` a softmax of ``-|c_m - c_n|^2`` (meters, unscaled).

Features are encoded from sample positions taken relative to the voxel
center, and ``J_m`` is the derivative with respect to shifting the samples.
Seen from ``c_n`` the samples of ``m`` sit shifted by ``c_m - c_n``, which
is the displacement used above.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .codec import encode_sets_jacobian
from .errors import ConsistencyError, EmptyInputError
from .geometry import SE3Pose, check_rotation
from .voxelmap import GridSpec, ImplicitMap, fuse, pack_keys, remove, unpack_keys

K_NEIGHBORS = 8
JACOBIAN_STEP = 0.01
# neighbors must be strictly closer than a voxel size; the slack keeps
# lattice-aligned face neighbors (distance == voxel size up to rounding) out
GATE_SLACK = 1e-6


def compute_jacobian(codec, positions, normals, center, step=JACOBIAN_STEP):
    """``(2l, 3, 3)`` forward-difference Jacobian of one voxel's feature.

    ``codec`` may also be any callable ``f(rel_positions, normals) -> (C, 3)``.
    """
    positions = np.asarray(positions, float).reshape(-1, 3)
    if len(positions) == 0:
        raise EmptyInputError("cannot differentiate an empty voxel")
    if not step > 0:
        raise ValueError("step must be positive")
    rel = positions - np.asarray(center, float)
    if callable(codec):
        base = np.asarray(codec(rel, normals), float)
        cols = [(np.asarray(codec(rel + step * e, normals), float) - base) / step for e in np.eye(3)]
        return np.stack(cols, axis=-1)
    enc = getattr(codec, "encoder", codec)
    _, J = encode_sets_jacobian(enc, rel, np.asarray(normals, float).reshape(-1, 3),
                                np.zeros(len(rel), int), 1, step)
    return J[0]


def rotate_features(F, R):
    """Rotate ``(..., C, 3)`` features: every row ``f -> R f``."""
    return F @ R.T


def rotate_jacobians(J, R):
    """Rotate ``(N, C, 3, 3)`` Jacobians on both the feature and the translation side."""
    return np.einsum("ab,ncbp,qp->ncaq", R, J, R, optimize=True)


@dataclass
class TransformedVoxels:
    centers: np.ndarray
    features: np.ndarray
    jacobians: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.centers)


def transform_local_map(local, pose):
    """Move a :class:`FrameLocalMap` by ``pose`` (its map is in frame coordinates)."""
    if not isinstance(pose, SE3Pose):
        pose = SE3Pose(*pose)
    R = check_rotation(pose.R)
    m = local.map
    return TransformedVoxels(
        centers=pose.apply(m.centers()),
        features=rotate_features(m.features, R),
        jacobians=rotate_jacobians(local.jacobians, R),
        weights=m.weights.copy(),
    )


def softmax_weights(sq_dist):
    """Normalized ``exp(-d^2)`` along the last axis; ``inf`` entries get weight 0."""
    e = np.exp(-(sq_dist - np.min(sq_dist, axis=-1, keepdims=True)))
    e = np.where(np.isfinite(sq_dist), e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def neighbor_table(source_centers, grid, k=K_NEIGHBORS):
    """Target lattice voxels and their gated ``k`` nearest sources.

    Returns ``(target_indices (T, 3), neighbors (T, k), sq_dist (T, k))``;
    missing neighbors have index -1 and distance ``inf``.  Ties are broken
    by the smaller source index.
    """
    src = np.asarray(source_centers, float)
    s = grid.voxel_size
    gate = s * (1.0 - GATE_SLACK)
    if len(src) == 0:
        return np.zeros((0, 3), np.int64), np.zeros((0, k), np.int64), np.zeros((0, k))
    u = (src - grid.origin) / s
    base = np.floor(u + 0.5).astype(np.int64)
    cand = np.concatenate([base - np.asarray(o) for o in np.ndindex(2, 2, 2)])
    keys = np.unique(pack_keys(cand))
    targets = unpack_keys(keys)
    tc = grid.center_of(targets)
    q = min(k + 4, len(src))
    tree = cKDTree(src)
    _, nb = tree.query(tc, k=q, distance_upper_bound=gate)
    nb = nb.reshape(len(tc), q)
    valid = nb < len(src)
    nb_safe = np.where(valid, nb, 0)
    d2 = np.sum((src[nb_safe] - tc[:, None, :]) ** 2, axis=-1)
    valid &= d2 < gate**2
    d2 = np.where(valid, d2, np.inf)
    nb = np.where(valid, nb, np.iinfo(np.int64).max)
    order = np.lexsort((nb, d2), axis=-1)[:, :k]
    d2 = np.take_along_axis(d2, order, axis=-1)
    nb = np.take_along_axis(nb, order, axis=-1)
    nb = np.where(np.isfinite(d2), nb, -1)
    if nb.shape[1] < k:
        pad = k - nb.shape[1]
        nb = np.pad(nb, ((0, 0), (0, pad)), constant_values=-1)
        d2 = np.pad(d2, ((0, 0), (0, pad)), constant_values=np.inf)
    has = nb[:, 0] >= 0
    return targets[has], nb[has], d2[has]


def interpolate_to_grid(voxels, grid, k=K_NEIGHBORS, channels=None):
    """Resample moved voxels onto ``grid``; returns an :class:`ImplicitMap`."""
    if k < 1:
        raise ValueError("k must be at least 1")
    grid = grid if isinstance(grid, GridSpec) else GridSpec(*grid)
    channels = channels or (voxels.features.shape[1] if len(voxels) else None)
    targets, nb, d2 = neighbor_table(voxels.centers, grid, k)
    if len(targets) == 0:
        return ImplicitMap(grid, channels) if channels else ImplicitMap(grid)
    s = softmax_weights(d2)                                   # (T, k)
    idx = np.where(nb >= 0, nb, 0)
    tc = grid.center_of(targets)
    disp = voxels.centers[idx] - tc[:, None, :]               # c_m - c_n, (T, k, 3)
    lin = voxels.features[idx] + np.einsum("tkcap,tkp->tkca", voxels.jacobians[idx], disp)
    F = np.einsum("tk,tkca->tca", s, lin)
    w = np.sum(s * voxels.weights[idx], axis=1)
    return ImplicitMap(grid, F.shape[1], targets, F, w)


def place_frame(local, pose, grid, k=K_NEIGHBORS):
    """Transform a frame map to ``pose`` and interpolate it onto ``grid``."""
    return interpolate_to_grid(transform_local_map(local, pose), grid, k, local.map.channels)


def remap_frame(global_map, frame, new_pose, k=K_NEIGHBORS):
    """Move an already fused frame to ``new_pose``.

    Removes the frame's cached contribution, re-places it from its original
    local copy and fuses the result.  Updates ``frame.pose`` and
    ``frame.fused``; returns the new global map.
    """
    if frame.fused is None:
        raise ConsistencyError(f"frame {frame.frame_id} was never fused")
    stripped = remove(global_map, frame.fused)
    placed = place_frame(frame, new_pose, global_map.grid, k)
    out = fuse(stripped, placed)
    frame.pose = new_pose
    frame.fused = placed
    return out
