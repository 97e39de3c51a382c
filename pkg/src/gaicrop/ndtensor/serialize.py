"""Flat binary container for named float64 tensors.

Layout: magic "GAIC", version u32, tensor count u32; then per tensor
name length u32 + UTF-8 name, rank u32, extents u32[rank], row-major
little-endian f64 data. Tensors are written in the given order and read
back in the same order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GAIC"
VERSION = 1


class ContainerError(ValueError):
    """Malformed or truncated parameter container."""


def save_tensors(path, tensors: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ContainerError(f"bad magic in {path}")
    (version, count) = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        out[name] = data.reshape(shape).astype(np.float64)
    if offset != len(blob):
        raise ContainerError(f"{len(blob) - offset} trailing bytes in {path}")
    return out
