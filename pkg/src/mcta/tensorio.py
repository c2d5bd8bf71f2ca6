"""Binary tensor blobs shared by the feature cache and checkpoints.

Layout: ``b"MCTA"``, one version byte, ``u32`` rank, ``rank`` x ``u32`` dims,
then the row-major little-endian float32 payload.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO

import numpy as np

from mcta.errors import CacheError

MAGIC = b"MCTA"
VERSION = 1


def encode(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + bytes([VERSION]) + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + array.tobytes()


def read_from(stream: BinaryIO) -> np.ndarray:
    """Read one blob from an open binary stream."""
    head = stream.read(9)
    if len(head) < 9 or head[:4] != MAGIC:
        raise CacheError("missing MCTA tensor header")
    if head[4] != VERSION:
        raise CacheError(f"unsupported tensor blob version {head[4]}")
    (rank,) = struct.unpack("<I", head[5:9])
    if rank > 8:
        raise CacheError(f"implausible tensor rank {rank}")
    raw = stream.read(4 * rank)
    if len(raw) != 4 * rank:
        raise CacheError("truncated tensor shape")
    shape = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise CacheError(f"truncated tensor payload: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write ``array`` atomically (temp file in the same directory, then rename)."""
    atomic_write(path, encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        array = read_from(fh)
        if fh.read(1):
            raise CacheError(f"{path}: trailing bytes after tensor payload")
    return array


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
