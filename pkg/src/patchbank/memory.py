"""Memory-bank construction and exact cosine nearest-neighbor scoring.

The bank is the flat set of unit-normalized nominal patch vectors gathered
from the (possibly rotated) reference images.  Scoring is an exact brute
force scan: the nearest-neighbor distance of a patch is 1 minus its maximum
dot product against the bank rows.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import FormatError, InvalidInputError
from .features import PatchFeatureGrid

LOGGER = logging.getLogger(__name__)


def normalize_rows(vectors: np.ndarray) -> tuple[np.ndarray, int]:
    """Unit-normalize rows in float64; zero rows become the first basis vector.

    Returns the normalized array and the number of replaced zero rows.
    Replacing instead of erroring keeps degenerate synthetic patches from
    killing a whole build; callers surface the count as a warning tally.
    """
    out = np.ascontiguousarray(vectors, dtype=np.float64)
    if out is vectors:
        out = out.copy()
    norms = np.linalg.norm(out, axis=1)
    zero = norms == 0.0
    n_zero = int(zero.sum())
    if n_zero:
        out[zero] = 0.0
        out[zero, 0] = 1.0
        norms = norms.copy()
        norms[zero] = 1.0
    out /= norms[:, None]
    return out, n_zero


@dataclass(frozen=True)
class MemoryBank:
    """Immutable bank of unit-normalized nominal patch vectors."""

    vectors: np.ndarray  # (count, dim) float64, rows unit-L2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise InvalidInputError(f"bank vectors must be a nonempty 2-D array, got {v.shape}")
        norms = np.linalg.norm(v, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise InvalidInputError("bank rows must be unit-normalized")
        object.__setattr__(self, "vectors", v)
        v.setflags(write=False)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def build_bank(
    grids: list[PatchFeatureGrid],
    meta: dict | None = None,
    masks: list | None = None,
) -> MemoryBank:
    """Stack patch vectors from reference grids into a normalized bank.

    Args:
        grids: feature grids of the (possibly rotated) reference images.
        meta: optional metadata record, stored verbatim plus build tallies.
        masks: optional foreground masks (one per grid); background patches
            are dropped before stacking.  By default references enter whole.

    Returns:
        MemoryBank with count = total kept patches.  Zero vectors are
        replaced by a fixed basis vector and counted in
        meta["zero_rows_replaced"].
    """
    if not grids:
        raise InvalidInputError("build_bank needs at least one grid")
    dims = {g.dim for g in grids}
    if len(dims) != 1:
        raise InvalidInputError(f"grids disagree on feature dim: {sorted(dims)}")
    if masks is not None and len(masks) != len(grids):
        raise InvalidInputError("masks list must match grids list")

    rows = []
    for i, g in enumerate(grids):
        flat = g.flat()
        if masks is not None and masks[i] is not None:
            bits = masks[i].bits.reshape(-1)
            if bits.shape[0] != flat.shape[0]:
                raise InvalidInputError(f"mask {i} shape does not match grid {i}")
            flat = flat[bits]
        rows.append(flat)
    stacked = np.concatenate(rows, axis=0)
    if stacked.shape[0] == 0:
        raise InvalidInputError("all reference patches were masked out")

    vectors, n_zero = normalize_rows(stacked)
    bank_meta = dict(meta or {})
    bank_meta["zero_rows_replaced"] = n_zero
    if n_zero:
        LOGGER.warning("replaced %d zero patch vectors with a basis vector", n_zero)
    return MemoryBank(vectors, bank_meta)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b); scale invariant; errors on zero vectors."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise InvalidInputError(f"dim mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidInputError("cosine distance is undefined for zero vectors")
    # dots of (near-)identical vectors can exceed 1 by a few ulp
    return max(0.0, float(1.0 - np.dot(a, b) / (na * nb)))


def nn_distance(p: np.ndarray, bank: MemoryBank, threads: int = 1) -> float:
    """Minimum cosine distance from p to any bank row (exact brute force)."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape[0] != bank.dim:
        raise InvalidInputError(f"query dim {p.shape[0]} != bank dim {bank.dim}")
    norm = np.linalg.norm(p)
    if norm == 0.0:
        raise InvalidInputError("cosine distance is undefined for zero vectors")
    q = (p / norm)[None, :]
    return max(0.0, float(1.0 - kernels.max_dot_scan(q, bank.vectors, threads=threads)[0]))


def score_grid(grid: PatchFeatureGrid, bank: MemoryBank, mask=None, threads: int = 1):
    """Nearest-neighbor distance per foreground patch of one test image.

    Background patches (mask bit false) are excluded: they get value 0, never
    enter aggregation, and render as background in maps.  Zero query vectors
    follow the same basis-vector replacement rule as the bank build.
    """
    from .scoring import PatchDistances

    if grid.dim != bank.dim:
        raise InvalidInputError(f"grid dim {grid.dim} != bank dim {bank.dim}")
    gh, gw = grid.grid_h, grid.grid_w
    values = np.zeros((gh, gw), dtype=np.float64)
    if mask is None:
        fg = np.ones((gh, gw), dtype=bool)
    else:
        if mask.bits.shape != (gh, gw):
            raise InvalidInputError(
                f"mask shape {mask.bits.shape} does not match grid {gh}x{gw}"
            )
        fg = mask.bits.astype(bool)
    flat_fg = fg.reshape(-1)
    if flat_fg.any():
        queries = grid.flat()[flat_fg]
        normalized, n_zero = normalize_rows(queries)
        if n_zero:
            LOGGER.warning("replaced %d zero query vectors with a basis vector", n_zero)
        dists = 1.0 - kernels.max_dot_scan(normalized, bank.vectors, threads=threads)
        # exact self-matches can give dots a few ulp above 1
        values.reshape(-1)[flat_fg] = np.maximum(dists, 0.0)
    return PatchDistances(values=values, excluded=~fg)


def coreset_reduce(bank: MemoryBank, target: int, seed: int = 0) -> MemoryBank:
    """Greedy k-center (farthest point) reduction in cosine distance.

    Starts from a seeded random row, then repeatedly adds the row farthest
    from the current selection.  Deterministic given (bank, target, seed).
    A target at or above the current count keeps every row.
    """
    if target < 1:
        raise InvalidInputError(f"target must be >= 1, got {target}")
    if target >= bank.count:
        meta = dict(bank.meta)
        meta["coreset"] = {"target": target, "seed": seed, "original_count": bank.count}
        return MemoryBank(bank.vectors.copy(), meta)

    rng = np.random.default_rng(seed)
    start = int(rng.integers(bank.count))
    selected = [start]
    # min cosine distance to the selected set, maintained incrementally
    min_dist = 1.0 - bank.vectors @ bank.vectors[start]
    for _ in range(target - 1):
        nxt = int(np.argmax(min_dist))
        selected.append(nxt)
        np.minimum(min_dist, 1.0 - bank.vectors @ bank.vectors[nxt], out=min_dist)
    meta = dict(bank.meta)
    meta["coreset"] = {"target": target, "seed": seed, "original_count": bank.count}
    return MemoryBank(bank.vectors[np.array(selected)].copy(), meta)


# --- bank file format (.amb) -------------------------------------------------

_AMB_MAGIC = b"AMB1"
_AMB_HEADER = struct.Struct("<4sIQI")


def save_bank(bank: MemoryBank, path) -> None:
    """Write a bank file: magic "AMB1", u32 dim, u64 count, u32 flags, f32 rows, JSON meta.

    Rows are stored as float32; loading renormalizes in float64, so row norms
    stay exactly 1 at the cost of ~1e-8 relative perturbation per component.
    """
    meta_bytes = json.dumps(bank.meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_AMB_HEADER.pack(_AMB_MAGIC, bank.dim, bank.count, 0))
        fh.write(bank.vectors.astype(np.float32).tobytes())
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)


def load_bank(path) -> MemoryBank:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _AMB_HEADER.size:
        raise FormatError(f"truncated header: need {_AMB_HEADER.size} bytes, have {len(data)} (offset 0)")
    magic, dim, count, _flags = _AMB_HEADER.unpack_from(data, 0)
    if magic != _AMB_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0 (expected {_AMB_MAGIC!r})")
    if dim < 1 or count < 1:
        raise FormatError(f"invalid bank header dim={dim} count={count} at offset 4")
    payload_end = _AMB_HEADER.size + 4 * dim * count
    if len(data) < payload_end:
        raise FormatError(
            f"truncated payload: need {4 * dim * count} bytes at offset {_AMB_HEADER.size}, "
            f"file ends at {len(data)}"
        )
    values = np.frombuffer(data, dtype="<f4", count=dim * count, offset=_AMB_HEADER.size)
    finite = np.isfinite(values)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise FormatError(f"non-finite value at offset {_AMB_HEADER.size + 4 * bad}")
    if len(data) < payload_end + 4:
        raise FormatError(f"truncated metadata length at offset {payload_end}")
    (meta_len,) = struct.unpack_from("<I", data, payload_end)
    if len(data) < payload_end + 4 + meta_len:
        raise FormatError(f"truncated metadata at offset {payload_end + 4}")
    meta = json.loads(data[payload_end + 4 : payload_end + 4 + meta_len]) if meta_len else {}
    vectors, _ = normalize_rows(values.astype(np.float64).reshape(count, dim))
    return MemoryBank(vectors, meta)
