"""Little-endian helpers shared by the binary file formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError


def write_header(fh: BinaryIO, magic: bytes, version: int) -> None:
    fh.write(magic)
    fh.write(struct.pack("<I", version))


def read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def read_header(fh: BinaryIO, magic: bytes, version: int) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (ver,) = struct.unpack("<I", read_exact(fh, 4))
    if ver != version:
        raise FormatError(f"unsupported version {ver}")


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", read_exact(fh, 4))[0]


def read_u8(fh: BinaryIO) -> int:
    return read_exact(fh, 1)[0]


def write_u32(fh: BinaryIO, *values: int) -> None:
    fh.write(struct.pack(f"<{len(values)}I", *values))


def write_u8(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<B", value))


def write_array(fh: BinaryIO, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_array(fh: BinaryIO, count: int, dtype: str) -> np.ndarray:
    nbytes = count * np.dtype(dtype).itemsize
    return np.frombuffer(read_exact(fh, nbytes), dtype=dtype).copy()


def expect_eof(fh: BinaryIO) -> None:
    if fh.read(1):
        raise FormatError("trailing bytes after payload")
