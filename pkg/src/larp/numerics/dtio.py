"""DT01 raw tensor format.

Layout: ``b"DT01"``, u8 rank, rank x u32 little-endian extents, then the
values as little-endian float64 in row-major order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DT01"


class FormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; return it and the end offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"bad DT01 magic at offset {offset}")
    pos = offset + 4
    if pos + 1 > len(buf):
        raise FormatError(f"truncated DT01 header at offset {pos}")
    rank = buf[pos]
    pos += 1
    if pos + 4 * rank > len(buf):
        raise FormatError(f"truncated DT01 extents at offset {pos}")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 8 * int(np.prod(shape, dtype=np.int64))
    if pos + nbytes > len(buf):
        raise FormatError(f"truncated DT01 payload at offset {pos}: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
    return arr, pos + nbytes


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


def write_tensor(stream: io.BufferedIOBase, arr: np.ndarray) -> None:
    stream.write(encode_tensor(arr))
