"""The toolkit's "DYSF" feature-file layout (little-endian).

magic "DYSF" | u16 version=1 | u16 reserved=0 | u32 t | u32 d | t*d float32,
frame-major. This module writes (and reads back, for verification) exactly
that layout; it is the file contract between the extractor and the toolkit.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DYSF"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")


class DysfError(ValueError):
    pass


def write(path, values: np.ndarray) -> Path:
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
        raise DysfError(f"need a nonempty t x d array, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise DysfError("feature values must be finite")
    t, d = values.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, t, d))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return path


def read(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise DysfError(f"{path}: truncated header")
        magic, version, reserved, t, d = _HEADER.unpack(header)
        if magic != MAGIC or version != VERSION or reserved != 0:
            raise DysfError(f"{path}: bad header")
        payload = fh.read(t * d * 4)
        if len(payload) != t * d * 4:
            raise DysfError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(t, d)
