"""Sequence mapping with pose updates, the two-path experiment and evaluation."""

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import ConsistencyError, DimensionError, EmptyInputError, GridMismatchError, PoseError
from .geometry import SE3Pose
from .mesh import METRIC_SAMPLES, TriangleMesh, accuracy, completeness, mesh_from_map
from .primitives import make_primitive
from .transform import place_frame, remap_frame
from .voxelmap import FrameLocalMap, GridSpec, ImplicitMap, build_local_map, encode_map, fuse

log = logging.getLogger(__name__)


@dataclass
class MapConfig:
    voxel_size: float = 0.1
    k: int = 8
    sigma_d: float = 0.06
    resolution: int = 4
    delta_t: float = 0.01
    min_points: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.voxel_size > 0 or not self.delta_t > 0 or not self.sigma_d > 0:
            raise ValueError("voxel_size, delta_t and sigma_d must be positive")
        if self.k < 1 or self.resolution < 2 or self.min_points < 1:
            raise ValueError("k >= 1, resolution >= 2 and min_points >= 1 are required")

    @classmethod
    def load(cls, path=None, **overrides):
        return io.read_config(path, cls, overrides)


@dataclass
class FramePacket:
    frame_id: int
    timestamp: float
    points: np.ndarray
    normals: np.ndarray
    pose: SE3Pose

    def __post_init__(self):
        self.points = np.asarray(self.points, float).reshape(-1, 3)
        self.normals = np.asarray(self.normals, float).reshape(-1, 3)
        if len(self.points) == 0:
            raise EmptyInputError(f"frame {self.frame_id} has no points")
        if self.normals.shape != self.points.shape:
            raise DimensionError(f"frame {self.frame_id}: one normal per point is required")
        if not isinstance(self.pose, SE3Pose):
            raise PoseError(f"frame {self.frame_id}: pose must be an SE3Pose")


class PoseTable:
    """Frame poses in increasing frame-id order, each with a dirty flag.

    A flag is raised when the pose of an already fused frame changes and is
    cleared by :meth:`clear` once the frame has been remapped.
    """

    def __init__(self):
        self._pose = {}
        self._stamp = {}
        self._dirty = {}

    @classmethod
    def from_stamped(cls, stamped):
        table = cls()
        for i, (ts, pose) in enumerate(stamped):
            table.add(i, pose, ts)
        return table

    def add(self, frame_id, pose, timestamp=0.0):
        if self._pose and frame_id <= max(self._pose):
            raise PoseError(f"frame ids must increase: {frame_id} after {max(self._pose)}")
        self._pose[frame_id] = pose
        self._stamp[frame_id] = float(timestamp)
        self._dirty[frame_id] = False

    def __len__(self):
        return len(self._pose)

    def __contains__(self, frame_id):
        return frame_id in self._pose

    def ids(self):
        return list(self._pose)

    def pose(self, frame_id):
        try:
            return self._pose[frame_id]
        except KeyError:
            raise PoseError(f"no pose for frame {frame_id}") from None

    def timestamp(self, frame_id):
        return self._stamp[frame_id]

    def update(self, frame_id, pose, fused=True):
        """Set a new pose; marks the entry dirty if the frame is fused and the pose changed."""
        old = self.pose(frame_id)
        changed = not (np.array_equal(old.R, pose.R) and np.array_equal(old.t, pose.t))
        self._pose[frame_id] = pose
        if changed and fused:
            self._dirty[frame_id] = True
        return changed

    def is_dirty(self, frame_id):
        return self._dirty[frame_id]

    def dirty(self):
        return [i for i, d in self._dirty.items() if d]

    def clear(self, frame_id):
        self._dirty[frame_id] = False

    def stamped(self):
        return [(self._stamp[i], self._pose[i]) for i in self._pose]


def read_trajectory(path):
    return PoseTable.from_stamped(io.read_tum(path))


def write_trajectory(path, table):
    io.write_tum(path, table.stamped())


# --- per-frame caches ------------------------------------------------------------


def _map_arrays(prefix, m):
    return {f"{prefix}_indices": m.indices, f"{prefix}_features": m.features, f"{prefix}_weights": m.weights}


def _map_from(prefix, data, grid):
    F = data[f"{prefix}_features"]
    return ImplicitMap(grid, F.shape[1], data[f"{prefix}_indices"], F, data[f"{prefix}_weights"])


def save_frame_cache(path, frame):
    """Full-precision cache of a fused frame (local map, Jacobians, fused map, pose)."""
    if frame.fused is None:
        raise ConsistencyError(f"frame {frame.frame_id} has not been fused")
    g = frame.map.grid
    np.savez(path, frame_id=frame.frame_id, voxel_size=g.voxel_size, origin=np.asarray(g.origin),
             R=frame.pose.R, t=frame.pose.t, jacobians=frame.jacobians, jacobian_step=frame.jacobian_step,
             **_map_arrays("local", frame.map), **_map_arrays("fused", frame.fused))


def load_frame_cache(path, global_grid=None):
    with np.load(path) as data:
        grid = GridSpec(float(data["voxel_size"]), tuple(data["origin"]))
        frame = FrameLocalMap(int(data["frame_id"]), SE3Pose(data["R"], data["t"]),
                              _map_from("local", data, grid), data["jacobians"], float(data["jacobian_step"]))
        frame.fused = _map_from("fused", data, global_grid or grid)
    return frame


def save_state(path, global_map):
    """Full-precision global map used by later remapping (the NIMM file is float32)."""
    g = global_map.grid
    np.savez(path, voxel_size=g.voxel_size, origin=np.asarray(g.origin), **_map_arrays("global", global_map))


def load_state(path):
    with np.load(path) as data:
        grid = GridSpec(float(data["voxel_size"]), tuple(data["origin"]))
        return _map_from("global", data, grid)


# --- the mapper ----------------------------------------------------------------


class Mapper:
    """Owns the global map and every fused frame's cache.

    With a ``workdir`` each fused frame is written to ``frame_<id>.npz`` and
    the global map to ``state.npz``, so a later process can remap frames
    without the raw point clouds.
    """

    def __init__(self, codec, config=None, workdir=None):
        self.codec = codec
        self.config = config or MapConfig()
        if codec is not None and not np.isclose(codec.voxel_size, self.config.voxel_size):
            raise GridMismatchError(
                f"codec trained for voxel size {codec.voxel_size}, map uses {self.config.voxel_size}")
        self.grid = GridSpec(self.config.voxel_size)
        channels = 2 * codec.latent_rows if codec is not None else 18
        self.global_map = ImplicitMap(self.grid, channels)
        self.poses = PoseTable()
        self.frames = {}
        self.workdir = Path(workdir) if workdir else None
        if self.workdir:
            self.workdir.mkdir(parents=True, exist_ok=True)
        self.timings = {"integrate": [], "remap": []}

    @classmethod
    def resume(cls, workdir, config=None):
        """Reload a mapper from its working directory (no codec needed for remapping)."""
        workdir = Path(workdir)
        state = workdir / "state.npz"
        if not state.exists():
            raise EmptyInputError(f"{workdir} holds no mapper state")
        global_map = load_state(state)
        cfg = config or MapConfig(voxel_size=global_map.voxel_size)
        m = cls(None, cfg, workdir)
        m.global_map = global_map
        m.grid = global_map.grid
        for path in sorted(workdir.glob("frame_*.npz")):
            frame = load_frame_cache(path, m.grid)
            m.frames[frame.frame_id] = frame
            m.poses.add(frame.frame_id, frame.pose)
        return m

    def _persist(self, frame):
        if self.workdir:
            save_frame_cache(self.workdir / f"frame_{frame.frame_id:06d}.npz", frame)

    def save(self):
        if self.workdir:
            save_state(self.workdir / "state.npz", self.global_map)

    def integrate(self, packet):
        """Encode a frame, place it at its pose and fuse it."""
        if packet.frame_id in self.frames:
            raise ConsistencyError(f"frame {packet.frame_id} is already fused")
        if self.codec is None:
            raise ConsistencyError("a codec is required to integrate new frames")
        t0 = time.perf_counter()
        cfg = self.config
        if packet.frame_id not in self.poses:
            self.poses.add(packet.frame_id, packet.pose, packet.timestamp)
        pose = self.poses.pose(packet.frame_id)
        local = build_local_map(self.codec, packet.points, packet.normals, self.grid, packet.frame_id,
                                pose, cfg.min_points, cfg.delta_t)
        placed = place_frame(local, pose, self.grid, cfg.k)
        self.global_map = fuse(self.global_map, placed)
        local.fused = placed
        self.frames[packet.frame_id] = local
        self._persist(local)
        self.timings["integrate"].append(time.perf_counter() - t0)
        return local

    def update_pose(self, frame_id, pose):
        return self.poses.update(frame_id, pose, fused=frame_id in self.frames)

    def apply_updates(self):
        """Remap every dirty frame; returns the remapped frame ids."""
        done = []
        for fid in self.poses.dirty():
            t0 = time.perf_counter()
            try:
                self.global_map = remap_frame(self.global_map, self.frames[fid], self.poses.pose(fid),
                                              self.config.k)
            except ConsistencyError as exc:
                raise ConsistencyError(f"frame {fid}: {exc}") from exc
            self.poses.clear(fid)
            self._persist(self.frames[fid])
            self.timings["remap"].append(time.perf_counter() - t0)
            done.append(fid)
        return done


@dataclass
class SequenceResult:
    map: ImplicitMap
    mapper: Mapper
    report: dict = field(default_factory=dict)


def run_sequence(codec, packets, config=None, events=(), workdir=None):
    """Integrate ``packets`` in order, applying pose events as they fall due.

    An event with ``step = s`` is applied once ``s`` frames have been fused;
    events due after the last frame are applied at the end.
    """
    mapper = Mapper(codec, config, workdir)
    packets = list(packets)
    for p in packets:
        mapper.poses.add(p.frame_id, p.pose, p.timestamp)
    pending = sorted(events, key=lambda e: e.step)
    applied = []

    def flush(upto):
        while pending and pending[0].step <= upto:
            e = pending.pop(0)
            if e.frame_id not in mapper.poses:
                raise PoseError(f"event for unknown frame {e.frame_id}")
            mapper.update_pose(e.frame_id, e.pose)
            applied.append(e)
        return mapper.apply_updates()

    remapped = []
    for step, packet in enumerate(packets, 1):
        mapper.integrate(packet)
        remapped += flush(step)
    remapped += flush(float("inf"))
    mapper.save()
    report = {
        "frames": len(packets),
        "voxels": len(mapper.global_map),
        "events_applied": len(applied),
        "frames_remapped": remapped,
        "integrate_seconds": mapper.timings["integrate"],
        "remap_seconds": mapper.timings["remap"],
    }
    return SequenceResult(mapper.global_map, mapper, report)


def apply_events(mapper, events):
    """Apply pose events to a resumed mapper and remap."""
    for e in events:
        if e.frame_id not in mapper.frames:
            raise PoseError(f"event for frame {e.frame_id}, which has no cache")
        mapper.update_pose(e.frame_id, e.pose)
    done = mapper.apply_updates()
    mapper.save()
    return done


def load_packets(frame_paths, table, viewpoint=(0.0, 0.0, 0.0)):
    """Pair frame files (in order) with trajectory entries (in order)."""
    ids = table.ids()
    if len(frame_paths) > len(ids):
        raise PoseError(f"{len(frame_paths)} frames but only {len(ids)} poses")
    out = []
    for fid, path in zip(ids, frame_paths):
        pts, nrm = io.read_frame(path, viewpoint=viewpoint)
        out.append(FramePacket(fid, table.timestamp(fid), pts, nrm, table.pose(fid)))
    return out


# --- evaluation -----------------------------------------------------------------


def _surface_points(x, count, seed):
    if isinstance(x, TriangleMesh):
        return x.sample_points(count, seed)
    x = np.asarray(x, float).reshape(-1, 3)
    if len(x) == 0:
        raise EmptyInputError("empty point set")
    return x


def eval_surface(recon, reference, samples=METRIC_SAMPLES, seed=0):
    """Accuracy/completeness record; meshes are sampled, point sets used as given."""
    a = _surface_points(recon, samples, seed)
    b = _surface_points(reference, samples, seed)
    acc = accuracy(a, b)
    comp = completeness(b, a)
    return {"accuracy": acc, "completeness": comp, "chamfer": 0.5 * (acc + comp),
            "recon_points": int(len(a)), "reference_points": int(len(b))}


def write_json(path, record):
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def two_path_frame(codec, points, normals, pose, config=None, samples=METRIC_SAMPLES, seed=0):
    """Compare transform-then-encode (A) with encode-then-transform (B) for one frame.

    Returns ``(record, map_a, map_b, mesh_a, mesh_b)``.  ``record`` holds the
    accuracy of B against A, the completeness of A by B and, over voxels both
    maps share, the largest feature difference.
    """
    cfg = config or MapConfig()
    grid = GridSpec(cfg.voxel_size)
    map_a = encode_map(codec, pose.apply(points), pose.rotate(normals), grid, cfg.min_points)
    local = build_local_map(codec, points, normals, grid, 0, pose, cfg.min_points, cfg.delta_t)
    map_b = place_frame(local, pose, grid, cfg.k)
    mesh_a = mesh_from_map(map_a, codec, cfg.resolution, cfg.sigma_d)
    mesh_b = mesh_from_map(map_b, codec, cfg.resolution, cfg.sigma_d)
    record = {"voxels_a": len(map_a), "voxels_b": len(map_b),
              "feature_error": _shared_feature_error(map_a, map_b)}
    if len(mesh_a) and len(mesh_b):
        record.update(eval_surface(mesh_b, mesh_a, samples, seed))
    else:
        record.update(accuracy=float("nan"), completeness=float("nan"), chamfer=float("nan"))
    return record, map_a, map_b, mesh_a, mesh_b


def _shared_feature_error(a, b):
    common, ia, ib = np.intersect1d(a.keys, b.keys, return_indices=True)
    if len(common) == 0:
        return float("nan")
    return float(np.max(np.abs(a.features[ia] - b.features[ib])))


CSV_FIELDS = ("frame", "accuracy", "completeness", "chamfer", "feature_error", "voxels_a", "voxels_b")


def run_two_path_experiment(codec, frames, poses, config=None, csv_path=None, series_path=None,
                            samples=METRIC_SAMPLES):
    """Two-path comparison over a sequence; ``frames`` are (points, normals) in sensor coordinates."""
    if len(frames) != len(poses):
        raise PoseError(f"{len(frames)} frames but {len(poses)} poses")
    rows = []
    for i, ((pts, nrm), pose) in enumerate(zip(frames, poses)):
        rec, *_ = two_path_frame(codec, pts, nrm, pose, config, samples, seed=i)
        rec["frame"] = i
        rows.append(rec)
        log.info("frame %d: accuracy %.4f completeness %.4f", i, rec["accuracy"], rec["completeness"])
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, CSV_FIELDS, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
    series = {k: [r[k] for r in rows] for k in ("frame", "accuracy", "completeness")}
    if series_path:
        write_json(series_path, series)
    return rows, series


def reconstruct_primitive(codec, shape, density=4000.0, seed=0, config=None, samples=METRIC_SAMPLES):
    """Encode surface samples of a primitive, mesh the map and score it against the true surface."""
    cfg = config or MapConfig()
    prim = make_primitive(shape)
    rng = np.random.default_rng(seed)
    count = int(round(density * prim.area()))
    pts, nrm = prim.sample_surface(count, rng)
    m = encode_map(codec, pts, nrm, GridSpec(cfg.voxel_size), cfg.min_points)
    mesh = mesh_from_map(m, codec, cfg.resolution, cfg.sigma_d)
    if len(mesh) == 0:
        raise EmptyInputError("reconstruction produced no surface")
    truth, _ = prim.sample_surface(samples, np.random.default_rng(seed + 1))
    return mesh, eval_surface(mesh, truth, samples, seed)
