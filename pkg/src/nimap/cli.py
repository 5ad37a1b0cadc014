"""Command line entry point: ``nimap <command> [--flags]``."""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import errors, io, pipeline
from .mesh import TriangleMesh, mesh_from_map, read_mesh
from .voxelmap import load_map, save_map

# exit codes per error category
EXIT_CODES = (
    (errors.ParseError, 3, "parse error"),
    (errors.FormatError, 3, "format error"),
    (errors.ConsistencyError, 4, "consistency error"),
    (errors.GridMismatchError, 5, "grid mismatch"),
    (errors.EmptyInputError, 6, "empty input"),
    (errors.PoseError, 7, "pose error"),
    (errors.TrainingError, 8, "training error"),
    (errors.DimensionError, 9, "dimension error"),
    (errors.NimapError, 1, "error"),
    (OSError, 2, "i/o error"),
    (ValueError, 10, "invalid argument"),
)


def _config(args):
    overrides = {f.name: getattr(args, f.name, None) for f in dataclasses.fields(pipeline.MapConfig)}
    return pipeline.MapConfig.load(args.config, **overrides)


def _frame_paths(spec):
    p = Path(spec)
    if p.is_dir():
        # .txt is left out so a trajectory next to the frames is not read as one
        files = sorted(f for f in p.iterdir() if f.suffix.lower() in (".ply", ".xyz", ".pts", ".xyzn"))
    else:
        files = [Path(s) for s in spec.split(",")]
    if not files:
        raise errors.EmptyInputError(f"no frame files in {spec}")
    return files


def _load_codec(path):
    from .weights_io import load_codec
    return load_codec(path)


def cmd_train(args):
    from .training import TrainerConfig, train_codec
    from .weights_io import save_codec
    cfg = TrainerConfig(iterations=args.iterations, seed=args.seed, shapes=args.shapes,
                        voxel_size=args.voxel_size or 0.1)
    result = train_codec(cfg)
    save_codec(result.codec, args.out)
    report = {"initial": result.initial, "final": result.final, "seconds": result.seconds,
              "iterations": cfg.iterations, "seed": cfg.seed}
    if args.report:
        pipeline.write_json(args.report, report)
    print(json.dumps(report))


def cmd_build(args):
    codec = _load_codec(args.codec)
    cfg = _config(args)
    table = pipeline.read_trajectory(args.trajectory)
    packets = pipeline.load_packets(_frame_paths(args.frames), table)
    events = io.read_events(args.events) if args.events else ()
    result = pipeline.run_sequence(codec, packets, cfg, events, args.workdir)
    save_map(result.map, args.out)
    if args.report:
        pipeline.write_json(args.report, result.report)
    print(f"fused {result.report['frames']} frames into {result.report['voxels']} voxels -> {args.out}")


def cmd_remap(args):
    mapper = pipeline.Mapper.resume(args.workdir)
    done = pipeline.apply_events(mapper, io.read_events(args.events))
    if args.out:
        save_map(mapper.global_map, args.out)
    print(f"remapped frames {done}")


def cmd_mesh(args):
    codec = _load_codec(args.codec)
    cfg = _config(args)
    m = load_map(args.map)
    mesh = mesh_from_map(m, codec, cfg.resolution, cfg.sigma_d)
    if args.out.lower().endswith(".obj"):
        mesh.write_obj(args.out)
    else:
        mesh.write_ply(args.out)
    print(f"{len(mesh.vertices)} vertices, {len(mesh)} triangles -> {args.out}")


def _surface(path):
    try:
        mesh = read_mesh(path)
        if len(mesh):
            return mesh
    except errors.FormatError:
        pass
    return io.read_frame(path)[0]


def cmd_eval(args):
    rec = pipeline.eval_surface(_surface(args.mesh), _surface(args.reference), args.samples, args.seed)
    if args.out:
        pipeline.write_json(args.out, rec)
    print(json.dumps(rec))


def cmd_twopath(args):
    codec = _load_codec(args.codec)
    cfg = _config(args)
    table = pipeline.read_trajectory(args.trajectory)
    paths = _frame_paths(args.frames)
    ids = table.ids()[:len(paths)]
    frames = [io.read_frame(p) for p in paths]
    rows, _ = pipeline.run_two_path_experiment(codec, frames, [table.pose(i) for i in ids], cfg,
                                               args.csv, args.series, args.samples)
    scored = [r for r in rows if np.isfinite(r["accuracy"])]
    if not scored:
        print(f"{len(rows)} frames: no frame produced a surface on both paths")
        return
    acc = np.mean([r["accuracy"] for r in scored])
    comp = np.mean([r["completeness"] for r in scored])
    print(f"{len(rows)} frames ({len(scored)} scored): mean accuracy {acc:.4f} m, mean completeness {comp:.4f} m")


def cmd_synth(args):
    from .synthetic import make_sequence
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seq = make_sequence(args.frames, args.density, args.seed)
    for i, (pts, nrm) in enumerate(seq.frames):
        io.write_frame(out / f"frame_{i:04d}.ply", pts, nrm, binary=True)
    io.write_tum(out / "trajectory.txt", [(float(i), p) for i, p in enumerate(seq.poses)])
    print(f"wrote {len(seq)} frames to {out}")


def _map_flags(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--voxel-size", dest="voxel_size", type=float)
    p.add_argument("--k", type=int, help="interpolation neighbors")
    p.add_argument("--sigma-d", dest="sigma_d", type=float, help="sigma threshold for meshing")
    p.add_argument("--resolution", type=int)
    p.add_argument("--delta-t", dest="delta_t", type=float, help="Jacobian step (m)")
    p.add_argument("--min-points", dest="min_points", type=int)
    p.add_argument("--seed", type=int)


def build_parser():
    ap = argparse.ArgumentParser(prog="nimap", description="Latent voxel maps that can be moved, fused and remapped")
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a codec on synthetic primitives")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=3000)
    p.add_argument("--shapes", type=int, default=240)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--voxel-size", dest="voxel_size", type=float)
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build", help="fuse a frame sequence into a map")
    p.add_argument("--codec", required=True)
    p.add_argument("--frames", required=True, help="directory (.ply/.xyz/.pts/.xyzn) or comma separated list")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--events")
    p.add_argument("--workdir", help="where per-frame caches are kept")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _map_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("remap", help="apply pose events to a built map")
    p.add_argument("--workdir", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_remap)

    p = sub.add_parser("mesh", help="extract a surface mesh")
    p.add_argument("--codec", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True, help=".ply or .obj")
    _map_flags(p)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("eval", help="accuracy and completeness of a surface")
    p.add_argument("--mesh", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("twopath", help="transform-then-encode vs encode-then-transform")
    p.add_argument("--codec", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--csv")
    p.add_argument("--series")
    p.add_argument("--samples", type=int, default=100_000)
    _map_flags(p)
    p.set_defaults(func=cmd_twopath)

    p = sub.add_parser("synth", help="write a synthetic room sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--density", type=float, default=4000.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except tuple(cls for cls, _, _ in EXIT_CODES) as exc:
        for cls, code, label in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"nimap: {label}: {exc}", file=sys.stderr)
                return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
