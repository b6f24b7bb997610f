"""Batched zero-shot anomaly detection by mutual scoring across a test set.

With no reference images at all, every test image is scored against the
pooled patches of all the *other* images in the batch.  Because anomalies
are rare, the pooled set is mostly nominal and behaves like a memory bank.
The patch score is the mean of the smallest alpha-quantile of distances
(falling back to the single nearest neighbor when the tail is empty), which
keeps a few anomalous twins in the pool from hiding a real defect.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidInputError
from .features import PATCH_PX, PatchFeatureGrid
from .memory import normalize_rows
from .scoring import AnomalyMap, PatchDistances, ScoreConfig, aggregate, make_map

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchedConfig:
    alpha: float = 0.001
    aggregation: ScoreConfig = field(default_factory=ScoreConfig)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidInputError(f"alpha must be in (0, 1), got {self.alpha}")


def _prepare(grids: list[PatchFeatureGrid], masks) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if len(grids) < 2:
        raise InvalidInputError("mutual scoring needs at least 2 grids")
    dims = {g.dim for g in grids}
    if len(dims) != 1:
        raise InvalidInputError(f"grids disagree on feature dim: {sorted(dims)}")
    if masks is not None and len(masks) != len(grids):
        raise InvalidInputError("masks list must match grids list")
    normalized = []
    fgs = []
    total_zero = 0
    for i, g in enumerate(grids):
        rows, n_zero = normalize_rows(g.flat())
        total_zero += n_zero
        normalized.append(rows)
        if masks is not None and masks[i] is not None:
            bits = masks[i].bits
            if bits.shape != (g.grid_h, g.grid_w):
                raise InvalidInputError(f"mask {i} shape does not match grid {i}")
            fgs.append(bits.reshape(-1).copy())
        else:
            fgs.append(np.ones(g.n_patches, dtype=bool))
    if total_zero:
        LOGGER.warning("replaced %d zero patch vectors with a basis vector", total_zero)
    return normalized, fgs


def tail_count(alpha: float, pool_size: int) -> int:
    """Number of smallest distances averaged per patch: max(1, floor(alpha * pool))."""
    return max(1, math.floor(alpha * pool_size))


def mutual_patch_scores(
    grids: list[PatchFeatureGrid],
    j: int,
    cfg: BatchedConfig,
    masks=None,
    threads: int = 1,
) -> PatchDistances:
    """Patch scores of grid j against the pooled patches of all other grids.

    When masks are given, background patches are excluded both as queries
    (flagged excluded in the result) and from the pooled set.
    """
    normalized, fgs = _prepare(grids, masks)
    return _mutual_scores_prepared(grids, normalized, fgs, j, cfg, threads)


def _mutual_scores_prepared(grids, normalized, fgs, j, cfg, threads) -> PatchDistances:
    if not 0 <= j < len(grids):
        raise InvalidInputError(f"index {j} out of range for batch of {len(grids)}")
    pool = np.concatenate(
        [normalized[i][fgs[i]] for i in range(len(grids)) if i != j], axis=0
    )
    if pool.shape[0] == 0:
        raise InvalidInputError("pooled patch set is empty; nothing to score against")
    g = grids[j]
    values = np.zeros((g.grid_h, g.grid_w), dtype=np.float64)
    fg = fgs[j]
    if fg.any():
        k = tail_count(cfg.alpha, pool.shape[0])
        scores = kernels.tail_mean_distance_scan(normalized[j][fg], pool, k, threads=threads)
        # duplicate patches across images can give dots a few ulp above 1
        values.reshape(-1)[fg] = np.maximum(scores, 0.0)
    return PatchDistances(values=values, excluded=~fg.reshape(g.grid_h, g.grid_w))


def batched_run(
    grids: list[PatchFeatureGrid],
    cfg: BatchedConfig,
    masks=None,
    threads: int = 1,
    with_maps: bool = True,
) -> tuple[list[float], list[AnomalyMap | None]]:
    """Mutually score every image of the batch; output order matches input order."""
    normalized, fgs = _prepare(grids, masks)

    def score_one(j: int) -> tuple[float, AnomalyMap | None]:
        d = _mutual_scores_prepared(grids, normalized, fgs, j, cfg, threads=1)
        amap = None
        if with_maps:
            g = grids[j]
            amap = make_map(d, g.grid_h * PATCH_PX, g.grid_w * PATCH_PX, cfg.aggregation)
        return aggregate(d, cfg.aggregation), amap

    if threads <= 1 or len(grids) == 1:
        results = [score_one(j) for j in range(len(grids))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            results = list(pool_exec.map(score_one, range(len(grids))))
    return [r[0] for r in results], [r[1] for r in results]
