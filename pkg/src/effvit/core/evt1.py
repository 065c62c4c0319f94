"""EVT1 binary tensor format.

Layout (little-endian, no padding, no footer)::

    b"EVT1" | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim x u32 extents | raw elements
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from effvit.core.tensor import Tensor
from effvit.errors import InputError

MAGIC = b"EVT1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode(t: Tensor) -> bytes:
    code = _CODE_OF[t.dtype]
    header = MAGIC + struct.pack("<BB", code, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.data.astype(_CODES[code], copy=False).tobytes()


def decode_from(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one tensor starting at ``offset``; return it and the offset just past it."""
    if buf[offset : offset + 4] != MAGIC:
        raise InputError(f"bad magic {bytes(buf[offset:offset + 4])!r}, expected {MAGIC!r}", offset)
    pos = offset + 4
    if len(buf) < pos + 2:
        raise InputError("truncated header", pos)
    code, ndim = buf[pos], buf[pos + 1]
    if code not in _CODES:
        raise InputError(f"unknown dtype code {code}", pos)
    pos += 2
    if len(buf) < pos + 4 * ndim:
        raise InputError(f"truncated extents: need {ndim} u32 values", pos)
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    for i, s in enumerate(shape):
        if s == 0:
            raise InputError(f"extent {i} is zero", pos + 4 * i)
    pos += 4 * ndim
    dt = _CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise InputError(f"truncated data: need {nbytes} bytes, have {len(buf) - pos}", pos)
    data = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
    return Tensor(data.astype(dt.newbyteorder("="))), pos + nbytes


def decode(buf: bytes) -> Tensor:
    t, end = decode_from(buf, 0)
    if end != len(buf):
        raise InputError(f"{len(buf) - end} trailing bytes after tensor data", end)
    return t


def save(t: Tensor, path) -> None:
    Path(path).write_bytes(encode(t))


def load(path) -> Tensor:
    return decode(Path(path).read_bytes())
