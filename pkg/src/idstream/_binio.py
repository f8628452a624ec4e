"""Float32 array sidecars.

Layout: magic ``F32A``, uint32 array count, then per array a uint32 ndim,
``ndim`` uint32 dimensions and the row-major float32 payload. Everything is
little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"F32A"


def write_arrays(path: str | Path, arrays: Iterable[np.ndarray]) -> int:
    arrays = [np.ascontiguousarray(a, dtype="<f4") for a in arrays]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes(order="C"))
    return len(arrays)


def read_arrays(path: str | Path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a float32 sidecar (bad magic)")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    out = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        out.append(arr.astype(np.float64))
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out
