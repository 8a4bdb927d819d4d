"""Reading and writing complex matrices in the CMPX v1 binary format.

Layout (little-endian throughout)::

    0-3    b"CMPX"
    4      version (1)
    5      dtype (0 = complex128 as real/imag float64 pairs)
    6-7    reserved, zero
    8-11   rows (uint32)
    12-15  cols (uint32)
    16-    rows*cols values, column-major, real part then imaginary part
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Union

import numpy as np

from .errors import FormatError

MAGIC = b"CMPX"
VERSION = 1
DTYPE_COMPLEX128 = 0
_HEADER = struct.Struct("<4sBBHII")

PathLike = Union[str, "os.PathLike[str]"]


def encode_cmpx(matrix: np.ndarray) -> bytes:
    a = np.asarray(matrix)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise FormatError(f"CMPX stores 2-D matrices, got ndim={a.ndim}")
    rows, cols = a.shape
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_COMPLEX128, 0, rows, cols)
    body = np.asfortranarray(a.astype(np.complex128)).ravel(order="F").astype("<c16")
    return header + body.tobytes()


def decode_cmpx(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FormatError("truncated CMPX header")
    magic, version, dtype, reserved, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported CMPX version {version}")
    if dtype != DTYPE_COMPLEX128:
        raise FormatError(f"unsupported CMPX dtype {dtype}")
    if reserved != 0:
        raise FormatError("reserved header bytes must be zero")
    expected = _HEADER.size + 16 * rows * cols
    if len(data) != expected:
        raise FormatError(f"CMPX payload has {len(data)} bytes, expected {expected}")
    flat = np.frombuffer(data, dtype="<c16", count=rows * cols, offset=_HEADER.size)
    return flat.reshape((rows, cols), order="F").astype(np.complex128)


def write_cmpx(path_or_file: Union[PathLike, BinaryIO], matrix: np.ndarray) -> None:
    payload = encode_cmpx(matrix)
    if hasattr(path_or_file, "write"):
        path_or_file.write(payload)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(payload)


def read_cmpx(path_or_file: Union[PathLike, BinaryIO]) -> np.ndarray:
    if hasattr(path_or_file, "read"):
        return decode_cmpx(path_or_file.read())
    with open(path_or_file, "rb") as fh:
        return decode_cmpx(fh.read())
