"""Readers and writers for point frames, trajectories, events and configs.

Point frames are PLY (ascii or binary little endian, vertex element first,
``x y z`` and optionally ``nx ny nz``) or whitespace separated text with three
or six numbers per line.  Trajectories follow the TUM convention
``timestamp tx ty tz qx qy qz qw``; pose-update events use
``step frame_id tx ty tz qx qy qz qw`` and are applied once ``step`` frames
have been fused.
"""

import dataclasses
import warnings
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInputError, FormatError, ParseError
from .geometry import SE3Pose

NORMAL_NEIGHBORS = 16
QUAT_TOL = 1e-3

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def estimate_normals(points, k=NORMAL_NEIGHBORS, viewpoint=(0.0, 0.0, 0.0)):
    """Unit normals from k-NN plane fits, flipped to face ``viewpoint``."""
    points = np.asarray(points, float).reshape(-1, 3)
    if len(points) < 3:
        raise EmptyInputError("need at least three points to estimate normals")
    k = min(k, len(points))
    _, nb = cKDTree(points).query(points, k=k)
    nbh = points[nb]
    centered = nbh - nbh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = np.sum(normals * (np.asarray(viewpoint, float) - points), axis=1) < 0
    normals[flip] *= -1
    return normals


def _read_ply(data, path):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:body_start].decode("ascii", errors="replace").splitlines()
    fmt, elements = None, []
    for lineno, line in enumerate(header, 1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", lineno)
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], None))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise ParseError(f"unknown property type {tok[1]!r}", lineno)
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", lineno)
    if not elements or elements[0][0] != "vertex":
        raise FormatError(f"{path}: the vertex element must come first")
    _, count, props = elements[0]
    if any(t is None for _, t in props):
        raise FormatError(f"{path}: list properties on vertices are not supported")
    names = [n for n, _ in props]
    if fmt == "ascii":
        lines = data[body_start:].decode("ascii", errors="replace").splitlines()
        if len(lines) < count:
            raise ParseError(f"expected {count} vertex lines, found {len(lines)}", len(header) + len(lines))
        rows = []
        for i in range(count):
            vals = lines[i].split()
            if len(vals) < len(props):
                raise ParseError(f"expected {len(props)} values", len(header) + i + 1)
            try:
                rows.append([float(v) for v in vals[:len(props)]])
            except ValueError as exc:
                raise ParseError(str(exc), len(header) + i + 1) from None
        table = np.asarray(rows, float).reshape(count, len(props))
        cols = {n: table[:, j] for j, n in enumerate(names)}
    elif fmt == "binary_little_endian":
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        need = body_start + count * dtype.itemsize
        if len(data) < need:
            raise FormatError(f"{path}: binary body truncated at offset {len(data)} (need {need})")
        rec = np.frombuffer(data, dtype, count=count, offset=body_start)
        cols = {n: rec[n].astype(float) for n in names}
    else:
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")
    if not all(c in cols for c in "xyz"):
        raise FormatError(f"{path}: vertices lack x/y/z")
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    nrm = None
    if all(c in cols for c in ("nx", "ny", "nz")):
        nrm = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    return pts, nrm


def _read_xyz(text, path):
    pts, nrm = [], []
    width = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            vals = [float(v) for v in line.replace(",", " ").split()]
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}", lineno) from None
        if len(vals) not in (3, 6):
            raise ParseError(f"{path}: expected 3 or 6 values, got {len(vals)}", lineno)
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise ParseError(f"{path}: mixed 3- and 6-column lines", lineno)
        pts.append(vals[:3])
        if width == 6:
            nrm.append(vals[3:])
    return np.asarray(pts, float).reshape(-1, 3), (np.asarray(nrm, float) if width == 6 else None)


def read_frame(path, fmt=None, viewpoint=(0.0, 0.0, 0.0), k=NORMAL_NEIGHBORS):
    """Read a point frame; returns ``(points, normals)``.

    Normals stored in the file are used (re-normalized); otherwise they are
    estimated and oriented toward ``viewpoint``.
    """
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    data = path.read_bytes()
    if fmt == "ply":
        pts, nrm = _read_ply(data, path)
    elif fmt in ("xyz", "txt", "xyzn", "pts"):
        pts, nrm = _read_xyz(data.decode("utf-8", errors="replace"), path)
    else:
        raise FormatError(f"{path}: unknown point format {fmt!r}")
    if len(pts) == 0:
        raise EmptyInputError(f"{path}: no points")
    if not np.all(np.isfinite(pts)):
        raise FormatError(f"{path}: non-finite coordinates")
    if nrm is None:
        nrm = estimate_normals(pts, k, viewpoint)
    else:
        norm = np.linalg.norm(nrm, axis=1, keepdims=True)
        if np.any(norm == 0):
            raise FormatError(f"{path}: zero-length normal")
        nrm = nrm / norm
    return pts, nrm


def write_frame(path, points, normals=None, binary=False):
    """Write points (and normals) as PLY, or as text when the suffix is not ``.ply``."""
    path = Path(path)
    points = np.asarray(points, float).reshape(-1, 3)
    cols = points if normals is None else np.hstack([points, np.asarray(normals, float)])
    if path.suffix.lower() != ".ply":
        np.savetxt(path, cols, fmt="%.9g")
        return
    names = ["x", "y", "z"] + ([] if normals is None else ["nx", "ny", "nz"])
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {len(points)}"] + [f"property double {n}" for n in names] + ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cols, "<f8").tobytes())
        else:
            np.savetxt(fh, cols, fmt="%.17g")


def parse_pose_fields(vals, lineno=None):
    t = np.asarray(vals[:3], float)
    q = np.asarray(vals[3:7], float)
    norm = np.linalg.norm(q)
    if norm == 0 or not np.all(np.isfinite(q)) or not np.all(np.isfinite(t)):
        raise ParseError("invalid quaternion or translation", lineno)
    if abs(norm - 1) > QUAT_TOL:
        warnings.warn(f"line {lineno}: quaternion norm {norm:.6f} normalized", stacklevel=3)
    return SE3Pose.from_quaternion(t, q / norm)


def _numeric_lines(path, width):
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != width:
            raise ParseError(f"{path}: expected {width} fields, got {len(tok)}", lineno)
        try:
            yield lineno, [float(v) for v in tok]
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}", lineno) from None


def read_tum(path):
    """List of ``(timestamp, SE3Pose)`` in file order."""
    return [(v[0], parse_pose_fields(v[1:], n)) for n, v in _numeric_lines(path, 8)]


def write_tum(path, stamped_poses):
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in stamped_poses:
            vals = [ts, *pose.t, *pose.quaternion()]
            fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


@dataclasses.dataclass(frozen=True)
class PoseEvent:
    step: int
    frame_id: int
    pose: SE3Pose


def read_events(path):
    events = []
    for n, v in _numeric_lines(path, 9):
        if v[0] != int(v[0]) or v[1] != int(v[1]):
            raise ParseError(f"{path}: step and frame id must be integers", n)
        events.append(PoseEvent(int(v[0]), int(v[1]), parse_pose_fields(v[2:], n)))
    return events


def write_events(path, events):
    with open(path, "w") as fh:
        fh.write("# step frame_id tx ty tz qx qy qz qw\n")
        for e in events:
            vals = [*e.pose.t, *e.pose.quaternion()]
            fh.write(f"{e.step} {e.frame_id} " + " ".join(f"{v:.17g}" for v in vals) + "\n")


def read_config(path, cls, overrides=None):
    """Fill dataclass ``cls`` from a ``key = value`` file plus overrides."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}: expected key = value", lineno)
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ParseError(f"{path}: unknown key {key!r}", lineno)
            values[key] = val
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    kwargs = {}
    for key, val in values.items():
        default = fields[key].default
        if isinstance(val, str) and not isinstance(default, str):
            try:
                val = type(default)(val) if not isinstance(default, bool) else val.lower() in ("1", "true", "yes")
            except (TypeError, ValueError) as exc:
                raise ParseError(f"bad value for {key}: {exc}") from None
        kwargs[key] = val
    return cls(**kwargs)
