"""The .pfv byte layout, restated from the engine's interchange contract.

Little-endian throughout: magic "PFV1"; u32 grid_h, grid_w, dim, flags
(bit0 = rows unit-normalized); grid_h * grid_w * dim float32 values in
row-major (row, column, channel) order; u32 metadata length; that many
bytes of UTF-8 JSON metadata.

Exported files always carry flags = 0: normalization is the engine's job,
keeping a single normalization point across feature producers.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"PFV1"

_HEADER = struct.Struct("<4sIIII")


def feature_bytes(
    features: np.ndarray, source_id: str, backbone: str, resolution: int
) -> bytes:
    """Serialize a (grid_h, grid_w, dim) float32 array to .pfv bytes."""
    if features.ndim != 3:
        raise ValueError(f"features must be 3-D, got shape {features.shape}")
    gh, gw, dim = features.shape
    meta = json.dumps(
        {"source_id": source_id, "backbone": backbone, "resolution": resolution},
        sort_keys=True,
    ).encode("utf-8")
    payload = np.ascontiguousarray(features, dtype=np.float32)
    return b"".join(
        [
            _HEADER.pack(MAGIC, gh, gw, dim, 0),
            payload.tobytes(),
            struct.pack("<I", len(meta)),
            meta,
        ]
    )


def parse_header(data: bytes) -> tuple[int, int, int, int]:
    """(grid_h, grid_w, dim, flags) of a .pfv byte string."""
    if len(data) < _HEADER.size:
        raise ValueError(f"truncated header: {len(data)} bytes")
    magic, gh, gw, dim, flags = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    return gh, gw, dim, flags
