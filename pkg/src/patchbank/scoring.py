"""Image-level aggregation statistics and anomaly-map generation.

The image score is a statistic of the per-patch nearest-neighbor distances;
the default is the mean of the top 1% (an empirical tail value at risk).
Anomaly maps place patch values at cell centers, upsample bilinearly to the
preprocessed pixel grid and smooth with a normalized Gaussian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import EmptyInputError, InvalidInputError
from .features import PATCH_PX

AGGREGATIONS = ("mean_top_fraction", "max_patch", "max_map")


@dataclass(frozen=True)
class ScoreConfig:
    """Aggregation statistic and map-smoothing parameters."""

    aggregation: str = "mean_top_fraction"
    fraction: float = 0.01
    sigma: float = 4.0

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise InvalidInputError(
                f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}"
            )
        if not 0.0 < self.fraction <= 1.0:
            raise InvalidInputError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.sigma <= 0.0:
            raise InvalidInputError(f"sigma must be > 0, got {self.sigma}")

    @property
    def kernel_radius(self) -> int:
        """Gaussian truncation radius in pixels."""
        return int(math.ceil(4.0 * self.sigma))


@dataclass
class PatchDistances:
    """Per-patch nearest-neighbor distances for one test image."""

    values: np.ndarray  # (grid_h, grid_w) float64, >= 0
    excluded: np.ndarray  # (grid_h, grid_w) bool; excluded cells carry value 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.excluded = np.asarray(self.excluded, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.excluded.shape:
            raise InvalidInputError(
                f"values {self.values.shape} and excluded {self.excluded.shape} must be "
                "matching 2-D arrays"
            )
        if not np.isfinite(self.values).all():
            raise InvalidInputError("patch distances contain non-finite values")
        if (self.values < 0).any():
            raise InvalidInputError("patch distances must be >= 0")
        if self.excluded.any() and self.values[self.excluded].any():
            raise InvalidInputError("excluded cells must carry value 0")

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    def included_values(self) -> np.ndarray:
        return self.values[~self.excluded]


@dataclass
class AnomalyMap:
    """Full-resolution per-pixel anomaly scores."""

    values: np.ndarray  # (h, w) float64, >= 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidInputError(f"map must be 2-D, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise InvalidInputError("anomaly map contains non-finite values")

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]


def aggregate(d: PatchDistances, cfg: ScoreConfig) -> float:
    """Collapse patch distances into one image-level score.

    mean_top_fraction averages the m = ceil(fraction * n_included) largest
    values, so at least one patch always contributes.  max_patch is the
    maximum patch distance; max_map the maximum over the smoothed map.
    """
    included = d.included_values()
    n = included.size
    if n == 0:
        raise EmptyInputError("every patch is excluded; nothing to aggregate")
    if cfg.aggregation == "max_patch":
        return float(included.max())
    if cfg.aggregation == "max_map":
        amap = make_map(d, d.grid_h * PATCH_PX, d.grid_w * PATCH_PX, cfg)
        return float(amap.values.max())
    m = math.ceil(cfg.fraction * n)
    top = np.partition(included, n - m)[n - m :]
    return float(top.mean())


def _axis_positions(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Cell-center anchoring: output pixel r samples input coordinate
    # (r + 0.5) * n_in / n_out - 0.5, clamped to the valid range.
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    np.clip(pos, 0.0, n_in - 1.0, out=pos)
    i0 = np.minimum(np.floor(pos).astype(np.intp), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def _gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def make_map(d: PatchDistances, out_h: int, out_w: int, cfg: ScoreConfig) -> AnomalyMap:
    """Bilinear upsampling of patch values plus normalized Gaussian smoothing.

    Patch values sit at cell centers; excluded cells contribute their stored
    0.  The Gaussian is truncated at cfg.kernel_radius with reflect boundary
    handling (no edge duplication).  For outputs smaller than the radius the
    effective radius shrinks to size - 1 per axis and the kernel is
    renormalized, keeping constants exactly preserved.

    Both steps are convex combinations with nonnegative weights, so the map
    maximum never exceeds the maximum input distance.
    """
    if out_h < 1 or out_w < 1:
        raise InvalidInputError(f"output size must be positive, got {out_h}x{out_w}")
    v = d.values
    ri0, ri1, rw = _axis_positions(v.shape[0], out_h)
    up = v[ri0, :] * (1.0 - rw)[:, None] + v[ri1, :] * rw[:, None]
    ci0, ci1, cw = _axis_positions(v.shape[1], out_w)
    up = up[:, ci0] * (1.0 - cw)[None, :] + up[:, ci1] * cw[None, :]

    for axis, size in ((0, out_h), (1, out_w)):
        radius = min(cfg.kernel_radius, size - 1)
        if radius > 0:
            kernel = _gaussian_kernel(cfg.sigma, radius)
            up = ndimage.correlate1d(up, kernel, axis=axis, mode="mirror")
    return AnomalyMap(np.maximum(up, 0.0))


# --- heatmap rendering --------------------------------------------------------

# Dark-to-bright anchors interpolated to a 256-entry lookup table.
_COLOR_ANCHORS = np.array(
    [
        (0, 0, 4),
        (40, 11, 84),
        (101, 21, 110),
        (159, 42, 99),
        (212, 72, 66),
        (245, 125, 21),
        (250, 193, 39),
        (252, 255, 164),
    ],
    dtype=np.float64,
)


def _build_lut() -> np.ndarray:
    xs = np.linspace(0.0, 255.0, len(_COLOR_ANCHORS))
    ramp = np.arange(256, dtype=np.float64)
    lut = np.stack([np.interp(ramp, xs, _COLOR_ANCHORS[:, c]) for c in range(3)], axis=1)
    return np.floor(lut + 0.5).astype(np.uint8)


_LUT = _build_lut()


def heat_index(values: np.ndarray, normalizer: float) -> np.ndarray:
    """Map values to color indices 0..255: clip to [0, normalizer], then
    floor(v / normalizer * 255 + 0.5).  normalizer / 2 lands on index 128."""
    if normalizer <= 0:
        raise InvalidInputError(f"normalizer must be > 0, got {normalizer}")
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, normalizer)
    return np.floor(v / normalizer * 255.0 + 0.5).astype(np.uint8)


def export_heatmap(amap: AnomalyMap, normalizer: float, path, raw_path=None) -> None:
    """Write an 8-bit PNG heatmap; optionally dump raw float values alongside.

    The raw dump reuses the feature-file layout with dim = 1 and pixel
    dimensions in the grid fields (values stored as float32).
    """
    rgb = _LUT[heat_index(amap.values, normalizer)]
    Image.fromarray(rgb).save(path, format="PNG")
    if raw_path is not None:
        dump_map(amap, raw_path)


def dump_map(amap: AnomalyMap, path) -> None:
    from .features import PatchFeatureGrid
    from .pfv import write_feature_file

    grid = PatchFeatureGrid(amap.values[:, :, None].astype(np.float32), source_id="anomaly-map")
    write_feature_file(grid, path)


def load_map_dump(path) -> AnomalyMap:
    from .pfv import read_feature_file

    grid = read_feature_file(path)
    if grid.dim != 1:
        raise InvalidInputError(f"map dump must have dim 1, got {grid.dim}")
    return AnomalyMap(grid.features[:, :, 0].astype(np.float64))
