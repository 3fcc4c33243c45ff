"""Raw little-endian tensor records.

A record is ``dtype code (1 byte) | ndim (u32) | dims (u32 each) | data``.
A standalone tensor file prefixes one record with an 8-byte magic and a
version byte.
"""

import struct
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"RECTNSR\x00"
VERSION = 1

_CODES = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8")}
_BY_DTYPE = {v: k for k, v in _CODES.items()}


class FormatError(ValueError):
    pass


def write_record(fh: BinaryIO, array: np.ndarray, dtype="<f4") -> None:
    dtype = np.dtype(dtype)
    data = np.ascontiguousarray(array, dtype=dtype)
    fh.write(_BY_DTYPE[dtype])
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_record(fh: BinaryIO) -> np.ndarray:
    code = _read_exact(fh, 1, "dtype code")
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code!r}")
    dtype = _CODES[code]
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
    dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
    count = int(np.prod(dims, dtype=np.int64))
    raw = _read_exact(fh, count * dtype.itemsize, "tensor data")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).astype(np.float64)


def check_header(fh: BinaryIO, magic: bytes, what: str) -> None:
    head = fh.read(len(magic) + 1)
    if len(head) != len(magic) + 1 or head[:len(magic)] != magic:
        raise FormatError(f"{what}: bad magic")
    if head[-1] != VERSION:
        raise FormatError(f"{what}: unsupported version {head[-1]} (expected {VERSION})")


def save_tensor(path, array: np.ndarray, dtype="<f4") -> None:
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC + bytes([VERSION]))
        write_record(fh, array, dtype)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        check_header(fh, TENSOR_MAGIC, str(path))
        arr = read_record(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor")
    return arr
