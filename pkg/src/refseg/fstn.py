"""FSTN tensor file format.

Layout, all little-endian:

    magic   4 bytes  b"FSTN"
    version 1 byte   (currently 1)
    dtype   1 byte   0 = float32, 1 = float64
    rank    1 byte
    dims    rank * uint32
    payload row-major array data
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FSTN"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FstnError(ValueError):
    """Malformed or truncated FSTN data."""


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, order="C")  # NOT ascontiguousarray: it promotes rank 0 to rank 1
    if arr.dtype not in _CODES:
        raise FstnError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.ndim > 255:
        raise FstnError("rank too large")
    head = MAGIC + struct.pack("<BBB", VERSION, _CODES[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return head + dims + payload


def loads(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record starting at offset; returns (array, next_offset)."""
    if len(buf) - offset < 7:
        raise FstnError("truncated header")
    if buf[offset : offset + 4] != MAGIC:
        raise FstnError("bad magic; not an FSTN record")
    version, dcode, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FstnError(f"unsupported format version {version}")
    if dcode not in _DTYPES:
        raise FstnError(f"unknown dtype code {dcode}")
    pos = offset + 7
    if len(buf) - pos < 4 * rank:
        raise FstnError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dt = _DTYPES[dcode]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dt.itemsize
    if len(buf) - pos < nbytes:
        raise FstnError("truncated payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims)
    return arr.astype(dt.newbyteorder("=")), pos + nbytes


def write(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps(arr))


def read(path) -> np.ndarray:
    arr, end = loads(Path(path).read_bytes())
    return arr
