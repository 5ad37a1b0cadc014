"""Binary parameter files.

Layout (little endian)::

    4 bytes   magic b"VNNW"
    u32       format version (1)
    u32       kind: 0 = plain parameter set, 1 = codec
    -- kind 1 only --
    u32       latent rows l
    u32       number of decoder widths W
    u32[W]    decoder widths
    f64       voxel size the codec was trained for
    --
    u32       layer count
    per layer:
      u16     name length, then the UTF-8 name
      u32     ndim, then u32[ndim] shape
      f32[*]  values, row major

Parameters are held in float64 in memory and stored as float32, so a
load/save cycle reproduces the file byte for byte.
"""

import struct

import numpy as np

from .codec import Codec, DecoderParams, EncoderParams
from .errors import FormatError

MAGIC = b"VNNW"
VERSION = 1
KIND_PLAIN = 0
KIND_CODEC = 1


def _pack_layers(params):
    out = [struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError(f"file truncated at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"file truncated at byte {self.pos}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b


def _read_layers(r):
    (count,) = r.take("<I")
    params = {}
    for _ in range(count):
        (n,) = r.take("<H")
        try:
            name = r.raw(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("layer name is not UTF-8") from exc
        (ndim,) = r.take("<I")
        if ndim > 8:
            raise FormatError(f"implausible layer rank {ndim}")
        shape = r.take(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.raw(4 * size), "<f4").astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes")
    return params


def _read_header(data, kind):
    r = _Reader(bytes(data))
    magic, version, got = r.take("<4sII")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported weight format version {version}")
    if got != kind:
        raise FormatError(f"expected file kind {kind}, found {got}")
    return r


def dumps_weights(params):
    """Serialize a ``{name: array}`` parameter set."""
    return struct.pack("<4sII", MAGIC, VERSION, KIND_PLAIN) + _pack_layers(params)


def loads_weights(data):
    return _read_layers(_read_header(data, KIND_PLAIN))


def dumps_codec(codec):
    widths = codec.decoder.widths
    head = struct.pack("<4sII", MAGIC, VERSION, KIND_CODEC)
    head += struct.pack("<II", codec.latent_rows, len(widths)) + struct.pack(f"<{len(widths)}I", *widths)
    head += struct.pack("<d", codec.voxel_size)
    return head + _pack_layers(codec.parameters())


def loads_codec(data):
    r = _read_header(data, KIND_CODEC)
    latent_rows, nw = r.take("<II")
    if nw < 2 or nw > 64:
        raise FormatError(f"implausible decoder width count {nw}")
    widths = tuple(r.take(f"<{nw}I"))
    (voxel_size,) = r.take("<d")
    if not voxel_size > 0:
        raise FormatError("voxel size must be positive")
    params = _read_layers(r)
    enc = {k[4:]: v for k, v in params.items() if k.startswith("enc.")}
    dec = {k[4:]: v for k, v in params.items() if k.startswith("dec.")}
    if "point.lin3" not in enc or enc["point.lin3"].shape[0] != latent_rows:
        raise FormatError("encoder layers do not match the header")
    return Codec(EncoderParams(enc, 1.0 / voxel_size), DecoderParams(dec, voxel_size, widths), voxel_size)


def save_weights(params, path):
    with open(path, "wb") as fh:
        fh.write(dumps_weights(params))


def load_weights(path):
    with open(path, "rb") as fh:
        return loads_weights(fh.read())


def save_codec(codec, path):
    with open(path, "wb") as fh:
        fh.write(dumps_codec(codec))


def load_codec(path):
    with open(path, "rb") as fh:
        return loads_codec(fh.read())
