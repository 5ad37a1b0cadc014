"""Reconstruct a 0.5 m sphere from surface samples and score the mesh."""

from pathlib import Path

from _common import get_codec, parser
from nimap.pipeline import reconstruct_primitive


def main():
    args = parser(__doc__).parse_args()
    out = Path(args.out)
    out.mkdir(exist_ok=True)
    codec = get_codec(args)
    for shape in ({"type": "sphere", "center": (0, 0, 0), "radius": 0.5},
                  {"type": "box", "center": (0, 0, 0), "half_extents": (0.4, 0.3, 0.2)}):
        mesh, rec = reconstruct_primitive(codec, shape)
        mesh.write_ply(out / f"{shape['type']}.ply")
        print(f"{shape['type']:6s} {len(mesh)} triangles  accuracy {rec['accuracy']:.4f}  "
              f"completeness {rec['completeness']:.4f}  chamfer {rec['chamfer']:.4f} m")


if __name__ == "__main__":
    main()
