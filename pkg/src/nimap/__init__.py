"""Rigidly movable latent voxel maps.

Point clouds are encoded into a sparse voxel grid of rotation-equivariant
latent features.  Such a map can be rigidly moved in latent space, fused,
partially removed and decoded into a signed distance field for meshing.
"""

from .codec import Codec
from .errors import (ConsistencyError, DimensionError, EmptyInputError, FormatError, GridMismatchError,
                     NimapError, ParseError, PoseError, TrainingError)
from .geometry import SE3Pose
from .mesh import TriangleMesh, accuracy, completeness, extract_mesh, mesh_from_map, sample_sdf
from .transform import interpolate_to_grid, place_frame, remap_frame, transform_local_map
from .voxelmap import GridSpec, ImplicitMap, build_local_map, encode_map, fuse, load_map, remove, save_map
from .weights_io import load_codec, save_codec

__version__ = "0.1.0"
