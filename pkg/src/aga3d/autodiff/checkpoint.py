"""AGAP parameter checkpoints.

Layout (little-endian)::

    b"AGAP"  u32 version  u32 count
    count x { u16 name_len, name (utf-8), u8 ndim, ndim x u32 dim, float64 payload (C order) }
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

__all__ = ["MAGIC", "VERSION", "dump_params", "parse_params", "store_params", "load_params"]

MAGIC = b"AGAP"
VERSION = 1


def dump_params(params):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(params)))
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def parse_params(data, path=None):
    view = memoryview(data)
    if len(view) < 12 or bytes(view[:4]) != MAGIC:
        raise FormatError("not an AGAP checkpoint (bad magic)", 0, path)
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, path)
    pos = 12
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(view):
                raise FormatError(f"tensor {name!r} payload truncated", pos, path)
            params[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
            pos += nbytes
    except struct.error:
        raise FormatError("checkpoint truncated", pos, path) from None
    if pos != len(view):
        raise FormatError("trailing bytes after last tensor", pos, path)
    return params


def store_params(params, path):
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dump_params(params))
    os.replace(tmp, path)


def load_params(path):
    return parse_params(Path(path).read_bytes(), path)
