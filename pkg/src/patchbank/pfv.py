"""Binary patch-feature file format (.pfv).

Layout, all little-endian:

    offset 0   magic bytes "PFV1"
    offset 4   u32 grid_h, u32 grid_w, u32 dim, u32 flags (bit0 = rows unit-normalized)
    offset 20  grid_h * grid_w * dim float32 values, row-major (row, column, channel)
    then       u32 metadata length, followed by that many bytes of UTF-8 JSON
               ({"source_id": ..., "backbone": ..., "resolution": ...})

The float payload round-trips bit-exactly because grids hold float32 in
memory.  Anomaly maps reuse the same layout with dim = 1 and the pixel
dimensions in the grid fields.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError
from .features import PatchFeatureGrid

MAGIC = b"PFV1"
FLAG_UNIT_NORMALIZED = 1

_HEADER = struct.Struct("<4sIIII")


def feature_file_bytes(
    grid: PatchFeatureGrid,
    backbone: str = "",
    resolution: int = 0,
    unit_normalized: bool = False,
    extra_meta: dict | None = None,
) -> bytes:
    """Serialize a feature grid to the .pfv byte layout."""
    flags = FLAG_UNIT_NORMALIZED if unit_normalized else 0
    meta = {"source_id": grid.source_id, "backbone": backbone, "resolution": resolution}
    if extra_meta:
        meta.update(extra_meta)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(grid.features, dtype=np.float32)
    return b"".join(
        [
            _HEADER.pack(MAGIC, grid.grid_h, grid.grid_w, grid.dim, flags),
            payload.tobytes(),
            struct.pack("<I", len(meta_bytes)),
            meta_bytes,
        ]
    )


def write_feature_file(
    grid: PatchFeatureGrid,
    path,
    backbone: str = "",
    resolution: int = 0,
    unit_normalized: bool = False,
    extra_meta: dict | None = None,
) -> None:
    data = feature_file_bytes(grid, backbone, resolution, unit_normalized, extra_meta)
    with open(path, "wb") as fh:
        fh.write(data)


def parse_feature_bytes(data: bytes) -> PatchFeatureGrid:
    """Parse .pfv bytes; raises FormatError naming the offending byte offset."""
    grid, _ = parse_feature_bytes_with_meta(data)
    return grid


def parse_feature_bytes_with_meta(data: bytes) -> tuple[PatchFeatureGrid, dict]:
    if len(data) < _HEADER.size:
        raise FormatError(f"truncated header: need {_HEADER.size} bytes, have {len(data)} (offset 0)")
    magic, grid_h, grid_w, dim, flags = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    if grid_h < 1 or grid_w < 1 or dim < 1:
        raise FormatError(f"invalid grid header {grid_h}x{grid_w}x{dim} at offset 4")
    count = grid_h * grid_w * dim
    payload_end = _HEADER.size + 4 * count
    if len(data) < payload_end:
        raise FormatError(
            f"truncated payload: need {4 * count} bytes at offset {_HEADER.size}, "
            f"file ends at {len(data)}"
        )
    values = np.frombuffer(data, dtype="<f4", count=count, offset=_HEADER.size)
    finite = np.isfinite(values)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise FormatError(f"non-finite value at offset {_HEADER.size + 4 * bad}")
    if len(data) < payload_end + 4:
        raise FormatError(f"truncated metadata length at offset {payload_end}")
    (meta_len,) = struct.unpack_from("<I", data, payload_end)
    meta_end = payload_end + 4 + meta_len
    if len(data) < meta_end:
        raise FormatError(
            f"truncated metadata: need {meta_len} bytes at offset {payload_end + 4}, "
            f"file ends at {len(data)}"
        )
    try:
        meta = json.loads(data[payload_end + 4 : meta_end].decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad metadata JSON at offset {payload_end + 4}: {exc}") from exc
    features = values.reshape(grid_h, grid_w, dim).copy()
    grid = PatchFeatureGrid(features, source_id=str(meta.get("source_id", "")))
    return grid, {"flags": flags, **meta}


def read_feature_file(path) -> PatchFeatureGrid:
    with open(path, "rb") as fh:
        return parse_feature_bytes(fh.read())


def read_feature_file_with_meta(path) -> tuple[PatchFeatureGrid, dict]:
    with open(path, "rb") as fh:
        return parse_feature_bytes_with_meta(fh.read())
