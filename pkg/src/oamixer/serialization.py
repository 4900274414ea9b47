"""OAT1 binary tensor files.

Layout: magic ``b"OAT1"``, u8 dtype tag (1=f32, 2=f64), u8 rank, rank x u32
little-endian dims, then the row-major little-endian payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"OAT1"
_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def encode_tensor(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    tag = _TAG_OF.get(arr.dtype)
    if tag is None:
        raise FormatError(f"OAT1 stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()


def decode_tensor(buf: bytes) -> Tensor:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("not an OAT1 tensor (bad magic)")
    tag, rank = struct.unpack_from("<BB", buf, 4)
    if tag not in _TAGS:
        raise FormatError(f"unknown OAT1 dtype tag {tag}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated OAT1 header")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    dtype = _TAGS[tag]
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + count * dtype.itemsize:
        raise FormatError(
            f"OAT1 payload is {len(buf) - off} bytes, expected {count * dtype.itemsize} for shape {dims}"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims)
    return Tensor(arr.astype(dtype.newbyteorder("="), copy=True))


def save_tensor(path: str | os.PathLike, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(t))


def load_tensor(path: str | os.PathLike) -> Tensor:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
