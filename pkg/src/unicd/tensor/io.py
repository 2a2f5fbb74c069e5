"""Raw tensor dumps: magic ``UTSR``, u32 rank, u32 extents, little-endian f64 payload."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import Tensor

MAGIC = b"UTSR"


class FormatError(ValueError):
    pass


def dumps_tensor(x) -> bytes:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def loads_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - offset != 8 * count:
        raise FormatError(f"payload has {len(buf) - offset} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)


def save_tensor(path, x) -> None:
    Path(path).write_bytes(dumps_tensor(x))


def load_tensor(path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes())
