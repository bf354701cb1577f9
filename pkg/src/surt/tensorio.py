"""Binary tensor files shared project-wide.

Layout: magic ``SURT``, u32 version (currently 1), u32 rank, u32 extents,
then the row-major payload as little-endian float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SURT"
VERSION = 1


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = struct.pack("<4sII", MAGIC, VERSION, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(extents)
        fh.write(arr.tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, rank = struct.unpack_from("<4sII", raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a tensor file (magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported tensor format version {version}")
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    data = np.frombuffer(raw, dtype="<f4", offset=12 + 4 * rank)
    expected = int(np.prod(shape)) if rank else 1
    if data.size != expected:
        raise ValueError(f"{path}: payload holds {data.size} values, header says {expected}")
    return data.reshape(shape).astype(np.float32)
