"""Binary tensor container used for dataset files and checkpoints.

One record, all integers little-endian, no padding, no compression:

    bytes 0-3    magic ``b"FRTN"``
    byte  4      format version, currently 0x01
    byte  5      dtype code: 0 = float32, 1 = float64
    byte  6      number of dimensions
    8 * ndim     unsigned 64-bit extents, slowest axis first
    remainder    row-major payload, little-endian floats

A file may hold a single record (dataset tensors) or a sequence of records
addressed by byte offset (checkpoints keep a JSON sidecar mapping parameter
names to offsets).
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"FRTN"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    """Raised when a file does not parse as a tensor record."""


def write_record(fp: BinaryIO, array: np.ndarray) -> int:
    """Append one record at the current position, returning its byte offset."""
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.ndim > 255:
        raise TensorFormatError("too many dimensions")
    offset = fp.tell()
    fp.write(MAGIC)
    fp.write(struct.pack("<BBB", VERSION, _DTYPE_CODES[arr.dtype], arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fp.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return offset


def read_record(fp: BinaryIO, offset: int | None = None) -> np.ndarray:
    """Read one record; seeks to `offset` first when given."""
    if offset is not None:
        fp.seek(offset)
    magic = fp.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    header = fp.read(3)
    if len(header) != 3:
        raise TensorFormatError("truncated header")
    version, dtype_code, ndim = struct.unpack("<BBB", header)
    if version != VERSION:
        raise TensorFormatError(f"unsupported format version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {dtype_code}")
    raw_shape = fp.read(8 * ndim)
    if len(raw_shape) != 8 * ndim:
        raise TensorFormatError("truncated shape")
    shape = struct.unpack(f"<{ndim}Q", raw_shape)
    dtype = _CODE_DTYPES[dtype_code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = fp.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise TensorFormatError("truncated payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    # native byte order, writable copy
    return arr.astype(dtype.newbyteorder("="))


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_record(fp, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fp:
        return read_record(fp)
