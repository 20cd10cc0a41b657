"""Standalone PAM1 container writer.

Implements the documented byte layout directly (little-endian header,
f32 payload with the token axis fastest) rather than importing the
consumer's library, so the two implementations cross-check each other
through the bytes alone.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"PAM1"
VERSION = 1


def container_bytes(records: Sequence[tuple[int, int, int, np.ndarray]]) -> bytes:
    """Serialize (t, layer, camera_id, values(H, W, n)) records."""
    if not records:
        raise ValueError("refusing to write an empty container")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for t, layer, camera_id, values in records:
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim != 3:
            raise ValueError(f"attention values must be (H, W, n), got {vals.shape}")
        if not np.isfinite(vals).all() or (vals < 0).any():
            raise ValueError("attention values must be finite and non-negative")
        h, w, n = vals.shape
        chunks.append(struct.pack("<IIIIII", int(t), int(layer), int(camera_id), h, w, n))
        chunks.append(np.ascontiguousarray(vals, dtype="<f4").tobytes())
    return b"".join(chunks)


def write_container(path, records: Sequence[tuple[int, int, int, np.ndarray]]) -> None:
    Path(path).write_bytes(container_bytes(records))
