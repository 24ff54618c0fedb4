"""XTEN binary tensor container.

Layout (little-endian)::

    b"XTEN1" | u8 dtype code | u8 rank | rank x u64 extents | raw elements

dtype code 0 is float32; code 1 (float64) is accepted for fixtures.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from .errors import ArtifactIOError, FormatError

MAGIC = b"XTEN1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_xten(stream: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _DTYPE_TO_CODE.get(array.dtype)
    if code is None:
        raise FormatError(f"XTEN cannot store dtype {array.dtype}")
    if array.ndim > 255:
        raise FormatError("XTEN rank is limited to 255")
    stream.write(MAGIC)
    stream.write(struct.pack("<BB", code, array.ndim))
    stream.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    stream.write(np.ascontiguousarray(array, dtype=_CODES[code]).tobytes())


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise ArtifactIOError(f"truncated XTEN data while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_xten(stream: BinaryIO) -> np.ndarray:
    magic = _read_exact(stream, len(MAGIC), "magic")
    if magic != MAGIC:
        raise ArtifactIOError(f"bad XTEN magic {magic!r}")
    code, rank = struct.unpack("<BB", _read_exact(stream, 2, "header"))
    if code not in _CODES:
        raise ArtifactIOError(f"unknown XTEN dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank, "extents"))
    dtype = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(stream, count * dtype.itemsize, "elements")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def dumps(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_xten(buf, array)
    return buf.getvalue()


def loads(data: bytes) -> np.ndarray:
    return read_xten(io.BytesIO(data))
