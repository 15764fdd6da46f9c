"""UNT1 tensor files: b"UNT1", u32 rank, rank x u64 dims, little-endian f64 payload."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"UNT1"


def dumps(arr) -> bytes:
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a UNT1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    off = 8 + 8 * rank
    n = int(np.prod(dims)) if rank else 1
    if len(buf) - off != 8 * n:
        raise ValueError(f"UNT1 payload holds {len(buf) - off} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)


def save(path, arr) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
