"""Zero-shot foreground masking by thresholding the first PCA component.

The first principal direction of the patch features separates object from
background on most object categories.  Cells whose mean-centered projection
is positive are foreground; the sign is oriented so that the image center
projects positive.  A once-per-category test checks that the mask actually
captures a centered object and disables masking otherwise (and always for
textures).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DegenerateInputError, InvalidInputError
from .features import PatchFeatureGrid, PreprocessConfig

LOGGER = logging.getLogger(__name__)

_POWER_ITERATIONS = 1000
_POWER_TOL = 1e-7


@dataclass(frozen=True)
class MaskPolicy:
    """Thresholds for the masking test and morphology element sizes."""

    center_fraction: float = 0.5  # central crop side fraction
    center_fg_min: float = 0.7
    global_fg_max: float = 0.8
    dilation_se: int = 3
    closing_se: int = 3

    def __post_init__(self):
        for name in ("center_fraction", "center_fg_min", "global_fg_max"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise InvalidInputError(f"{name} must be in (0, 1], got {v}")
        if self.dilation_se < 1 or self.closing_se < 1:
            raise InvalidInputError("structuring element sizes must be >= 1")


@dataclass
class PatchMask:
    """Boolean foreground indicator per patch cell (true = foreground)."""

    bits: np.ndarray  # (grid_h, grid_w) bool

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise InvalidInputError(f"mask must be 2-D, got shape {self.bits.shape}")

    @property
    def grid_h(self) -> int:
        return self.bits.shape[0]

    @property
    def grid_w(self) -> int:
        return self.bits.shape[1]

    def foreground_fraction(self) -> float:
        return float(self.bits.mean())


@dataclass(frozen=True)
class MaskTestResult:
    passed: bool
    center_fg_fraction: float
    global_fg_fraction: float

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "center_fg_fraction": self.center_fg_fraction,
            "global_fg_fraction": self.global_fg_fraction,
        }


def central_crop_slices(grid_h: int, grid_w: int, fraction: float) -> tuple[slice, slice]:
    """Row/column slices of the centered crop covering `fraction` per side."""
    ch = max(1, int(grid_h * fraction + 0.5))
    cw = max(1, int(grid_w * fraction + 0.5))
    top = (grid_h - ch) // 2
    left = (grid_w - cw) // 2
    return slice(top, top + ch), slice(left, left + cw)


def fit_pca_direction(
    grids: list[PatchFeatureGrid], center_fraction: float = 0.5
) -> np.ndarray:
    """First principal direction of the pooled mean-centered patch features.

    Power iteration on the covariance (at most 1000 iterations, tolerance
    1e-7 on the direction change), started from a fixed seeded vector.  The
    sign is chosen so the mean projection over the central crop cells of the
    first grid is positive, implementing the centered-object heuristic.

    Raises DegenerateInputError when the features carry no variance.
    """
    if not grids:
        raise InvalidInputError("fit_pca_direction needs at least one grid")
    dims = {g.dim for g in grids}
    if len(dims) != 1:
        raise InvalidInputError(f"grids disagree on feature dim: {sorted(dims)}")
    x = np.concatenate([g.flat() for g in grids], axis=0).astype(np.float64)
    if x.shape[0] < 2:
        raise InvalidInputError("need at least 2 patches to fit a direction")
    xc = x - x.mean(axis=0)

    rng = np.random.default_rng(0x5EED)
    v = rng.standard_normal(x.shape[1])
    v /= np.linalg.norm(v)
    converged = False
    for _ in range(_POWER_ITERATIONS):
        w = xc.T @ (xc @ v)
        norm = np.linalg.norm(w)
        if norm <= 1e-30:
            raise DegenerateInputError("features have zero variance; no principal direction")
        w /= norm
        if np.linalg.norm(w - v) < _POWER_TOL or np.linalg.norm(w + v) < _POWER_TOL:
            v = w
            converged = True
            break
        v = w
    if not converged:
        LOGGER.debug("power iteration hit the iteration cap; returning current direction")
    if float(np.linalg.norm(xc @ v)) <= 1e-30:
        raise DegenerateInputError("features have zero variance; no principal direction")

    first = grids[0]
    proj = ((first.flat() - x.mean(axis=0)) @ v).reshape(first.grid_h, first.grid_w)
    rs, cs = central_crop_slices(first.grid_h, first.grid_w, center_fraction)
    if proj[rs, cs].mean() < 0:
        v = -v
    return v


def patch_mask(grid: PatchFeatureGrid, direction: np.ndarray) -> PatchMask:
    """Threshold the mean-centered projection onto `direction` at 0.

    Centering uses the grid's own patch mean, so the mask of an image does
    not depend on which images the direction was fitted on.
    """
    direction = np.asarray(direction, dtype=np.float64).reshape(-1)
    if direction.shape[0] != grid.dim:
        raise InvalidInputError(f"direction dim {direction.shape[0]} != grid dim {grid.dim}")
    flat = grid.flat().astype(np.float64)
    proj = (flat - flat.mean(axis=0)) @ direction
    return PatchMask(proj.reshape(grid.grid_h, grid.grid_w) > 0)


def _binary_closing(padded: np.ndarray, se: np.ndarray) -> np.ndarray:
    return ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se)


def dilate_mask(mask: PatchMask, se_size: int = 3) -> PatchMask:
    """One binary dilation pass; the grid boundary clips the growth."""
    work = np.pad(mask.bits, se_size, mode="constant", constant_values=False)
    work = ndimage.binary_dilation(work, np.ones((se_size, se_size), dtype=bool))
    return PatchMask(work[se_size:-se_size, se_size:-se_size])


def morphological_closing(mask: PatchMask, se_size: int = 3) -> PatchMask:
    """Dilation followed by erosion; idempotent for a fixed element.

    The mask is padded before the morphology so the computation equals the
    true set closing; closing never escapes the grid rectangle, so the crop
    back is lossless.
    """
    work = np.pad(mask.bits, se_size, mode="constant", constant_values=False)
    work = _binary_closing(work, np.ones((se_size, se_size), dtype=bool))
    return PatchMask(work[se_size:-se_size, se_size:-se_size])


def refine_mask(mask: PatchMask, policy: MaskPolicy = MaskPolicy()) -> PatchMask:
    """One dilation pass followed by morphological closing, on the patch grid.

    Dilation growth is clipped at the grid boundary; the closing equals the
    true set closing (an all-foreground mask passes through unchanged).
    """
    dilated = dilate_mask(mask, policy.dilation_se)
    return morphological_closing(dilated, policy.closing_se)


def masking_test(mask: PatchMask, policy: MaskPolicy = MaskPolicy()) -> MaskTestResult:
    """Check that the mask looks like a centered object.

    Passes iff the foreground fraction inside the central crop is at least
    policy.center_fg_min and the global foreground fraction is at most
    policy.global_fg_max (an everywhere-foreground mask means a close-up
    where masking would only hide defects).
    """
    rs, cs = central_crop_slices(mask.grid_h, mask.grid_w, policy.center_fraction)
    center = float(mask.bits[rs, cs].mean())
    overall = float(mask.bits.mean())
    passed = center >= policy.center_fg_min and overall <= policy.global_fg_max
    return MaskTestResult(passed, center, overall)


def resolve_mask_mode(cfg: PreprocessConfig, test_result: MaskTestResult | None) -> bool:
    """Effective masking on/off for a category.

    Textures are never masked.  Explicit on/off wins otherwise; auto follows
    the masking-test outcome.
    """
    if cfg.texture_flag:
        return False
    if cfg.masking_mode == "off":
        return False
    if cfg.masking_mode == "on":
        return True
    return bool(test_result is not None and test_result.passed)


def compute_mask(
    grid: PatchFeatureGrid,
    policy: MaskPolicy = MaskPolicy(),
    direction: np.ndarray | None = None,
) -> PatchMask:
    """Full per-image mask: fit direction (unless given), threshold, refine."""
    if direction is None:
        direction = fit_pca_direction([grid], center_fraction=policy.center_fraction)
    return refine_mask(patch_mask(grid, direction), policy)


def save_mask_png(mask: PatchMask, path) -> None:
    """Debug output: 1-bit PNG, foreground white."""
    Image.fromarray(mask.bits).save(path, format="PNG", bits=1)
