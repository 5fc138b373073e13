"""Little-endian binary read/write primitives shared by the artifact formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import DataContractError


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def write_u64(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def write_f64(fh: BinaryIO, value: float) -> None:
    fh.write(struct.pack("<d", value))


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def write_f64_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise DataContractError(f"truncated file: wanted {n} bytes, got {len(raw)}")
    return raw


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", read_exact(fh, 4))[0]


def read_u64(fh: BinaryIO) -> int:
    return struct.unpack("<Q", read_exact(fh, 8))[0]


def read_f64(fh: BinaryIO) -> float:
    return struct.unpack("<d", read_exact(fh, 8))[0]


def read_str(fh: BinaryIO) -> str:
    return read_exact(fh, read_u32(fh)).decode("utf-8")


def read_f64_array(fh: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    raw = read_exact(fh, 8 * count)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def expect_magic(fh: BinaryIO, magic: bytes, kind: str) -> None:
    got = fh.read(len(magic))
    if got != magic:
        raise DataContractError(f"not a {kind} file: bad magic {got!r} (expected {magic!r})")
