"""Image preprocessing, rotation augmentation and patch feature extraction.

Geometry contract used everywhere downstream: the smaller image edge is
scaled to ``resolution`` (bilinear, aspect ratio preserved), the longer edge
is rounded to the nearest integer, then both edges are floored to multiples
of 14 by a center crop.  Every backbone emits one feature vector per 14x14
patch of the preprocessed image.
"""

from __future__ import annotations

import abc
import logging
import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import InvalidInputError

LOGGER = logging.getLogger(__name__)

PATCH_PX = 14

RIGHT_ANGLES = (0, 90, 180, 270)


@dataclass(frozen=True)
class PreprocessConfig:
    """Geometry and preprocessing policy for one category run."""

    resolution: int = 448
    rotation_angles: tuple[int, ...] = RIGHT_ANGLES
    masking_mode: str = "auto"  # auto | on | off
    texture_flag: bool = False

    def __post_init__(self):
        if self.resolution <= 0 or self.resolution % PATCH_PX != 0:
            raise InvalidInputError(
                f"resolution must be a positive multiple of {PATCH_PX}, got {self.resolution}"
            )
        angles = tuple(self.rotation_angles)
        if not angles or 0 not in angles:
            raise InvalidInputError("rotation_angles must be nonempty and contain 0")
        if len(set(angles)) != len(angles):
            raise InvalidInputError("rotation_angles must be distinct")
        if self.masking_mode not in ("auto", "on", "off"):
            raise InvalidInputError(f"masking_mode must be auto|on|off, got {self.masking_mode!r}")
        object.__setattr__(self, "rotation_angles", angles)


@dataclass
class PatchFeatureGrid:
    """A grid_h x grid_w grid of dim-dimensional patch feature vectors."""

    features: np.ndarray  # (grid_h, grid_w, dim) float32
    source_id: str = ""
    patch_px: int = PATCH_PX

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 3:
            raise InvalidInputError(f"features must be 3-D, got shape {self.features.shape}")
        if self.features.shape[0] < 1 or self.features.shape[1] < 1 or self.features.shape[2] < 1:
            raise InvalidInputError(f"empty feature grid: shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise InvalidInputError("feature grid contains non-finite values")

    @property
    def grid_h(self) -> int:
        return self.features.shape[0]

    @property
    def grid_w(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    def flat(self) -> np.ndarray:
        """(n_patches, dim) row-major view of the features."""
        return self.features.reshape(self.n_patches, self.dim)


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise InvalidInputError(
            f"expected uint8 RGB array of shape (h, w, 3), got {img.dtype} {img.shape}"
        )
    return img


def load_image(path) -> np.ndarray:
    """Decode an image file to a uint8 RGB array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def scaled_size(height: int, width: int, resolution: int) -> tuple[int, int]:
    """Post-resize size: smaller edge = resolution, longer edge rounded to nearest int."""
    if height <= width:
        return resolution, int(math.floor(width * resolution / height + 0.5))
    return int(math.floor(height * resolution / width + 0.5)), resolution


def predict_grid_shape(height: int, width: int, resolution: int) -> tuple[int, int]:
    """Patch grid shape the preprocessing geometry produces for an input size."""
    sh, sw = scaled_size(height, width, resolution)
    return sh // PATCH_PX, sw // PATCH_PX


def preprocess_image(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Scale the smaller edge to cfg.resolution and floor both edges to the patch grid.

    Bilinear resampling; center crop removes at most 13 pixels per edge.  The
    operation is idempotent: feeding its output back in returns the identical
    array (the resize is skipped when the size is already correct, so no
    resampling noise accumulates).
    """
    img = _check_image(img)
    h, w = img.shape[:2]
    if h < PATCH_PX or w < PATCH_PX:
        raise InvalidInputError(f"image {h}x{w} is smaller than one {PATCH_PX}x{PATCH_PX} patch")
    sh, sw = scaled_size(h, w, cfg.resolution)
    if (sh, sw) != (h, w):
        pil = Image.fromarray(img)
        img = np.asarray(pil.resize((sw, sh), Image.Resampling.BILINEAR))
    ch, cw = (sh // PATCH_PX) * PATCH_PX, (sw // PATCH_PX) * PATCH_PX
    if ch < PATCH_PX or cw < PATCH_PX:
        raise InvalidInputError(f"image collapses below one patch after scaling: {sh}x{sw}")
    top, left = (sh - ch) // 2, (sw - cw) // 2
    if (ch, cw) != (sh, sw):
        img = img[top : top + ch, left : left + cw]
    return np.ascontiguousarray(img)


def preprocess_mask(mask: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Apply the same geometry to a boolean mask (nearest-neighbor resize)."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise InvalidInputError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    sh, sw = scaled_size(h, w, cfg.resolution)
    if (sh, sw) != (h, w):
        pil = Image.fromarray(mask.astype(np.uint8) * 255)
        mask = np.asarray(pil.resize((sw, sh), Image.Resampling.NEAREST)) > 0
    ch, cw = (sh // PATCH_PX) * PATCH_PX, (sw // PATCH_PX) * PATCH_PX
    top, left = (sh - ch) // 2, (sw - cw) // 2
    return np.ascontiguousarray(mask[top : top + ch, left : left + cw])


def rotate_image(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate an image counterclockwise.

    Right angles (0/90/180/270) are lossless pixel permutations.  Other
    angles use bilinear resampling with reflect padding and keep the original
    canvas size; they exist for experimentation and are not part of the
    default augmentation set.
    """
    img = _check_image(img)
    if angle in RIGHT_ANGLES:
        if angle == 0:
            return img
        return np.ascontiguousarray(np.rot90(img, k=angle // 90))
    from scipy import ndimage

    return ndimage.rotate(
        img, angle, axes=(1, 0), reshape=False, order=1, mode="reflect"
    ).astype(np.uint8)


# --- toy backbone -----------------------------------------------------------

_LUMA = (0.299, 0.587, 0.114)
TOY_DIM = 14
_ORIENT_BINS = 8


def toy_extract(img: np.ndarray, source_id: str = "") -> PatchFeatureGrid:
    """Deterministic 14-dim patch features: color statistics plus edge orientation.

    Per 14x14 patch: mean of each RGB channel scaled to [0,1], standard
    deviation of each channel, and an 8-bin magnitude-weighted histogram of
    luminance gradient orientations normalized to sum 1.  Patches with no
    gradient signal get the uniform histogram 1/8 so the vector never
    collapses to zero mass.
    """
    img = _check_image(img)
    h, w = img.shape[:2]
    if h % PATCH_PX != 0 or w % PATCH_PX != 0:
        raise InvalidInputError(f"image {h}x{w} is not a multiple of {PATCH_PX} per edge")
    gh, gw = h // PATCH_PX, w // PATCH_PX
    n = gh * gw
    px = PATCH_PX * PATCH_PX

    a = img.astype(np.float64)
    a /= 255.0
    patches = (
        a.reshape(gh, PATCH_PX, gw, PATCH_PX, 3).transpose(0, 2, 1, 3, 4).reshape(n, px, 3)
    )
    s1 = patches.sum(axis=1)
    s2 = np.einsum("pij,pij->pj", patches, patches)
    means = s1 / px
    stds = np.sqrt(np.maximum(s2 / px - means * means, 0.0))

    lum = (
        patches[:, :, 0] * _LUMA[0] + patches[:, :, 1] * _LUMA[1] + patches[:, :, 2] * _LUMA[2]
    ).reshape(n, PATCH_PX, PATCH_PX)
    # Central differences inside each patch, one-sided at patch borders.
    gy = np.empty_like(lum)
    gx = np.empty_like(lum)
    gy[:, 1:-1] = (lum[:, 2:] - lum[:, :-2]) * 0.5
    gy[:, 0] = lum[:, 1] - lum[:, 0]
    gy[:, -1] = lum[:, -1] - lum[:, -2]
    gx[:, :, 1:-1] = (lum[:, :, 2:] - lum[:, :, :-2]) * 0.5
    gx[:, :, 0] = lum[:, :, 1] - lum[:, :, 0]
    gx[:, :, -1] = lum[:, :, -1] - lum[:, :, -2]

    mag = np.hypot(gx, gy).reshape(n, px)
    ang = np.arctan2(gy, gx).reshape(n, px)
    # Bin angles from [-pi, pi] into 8 sectors; atan2 can return exactly +pi,
    # which lands in bin 8 before the clip folds it back into bin 7.
    idx = np.floor((ang + np.pi) / (np.pi / (_ORIENT_BINS / 2))).astype(np.intp)
    np.clip(idx, 0, _ORIENT_BINS - 1, out=idx)
    flat_bins = (np.arange(n)[:, None] * _ORIENT_BINS + idx).ravel()
    hist = np.bincount(flat_bins, weights=mag.ravel(), minlength=n * _ORIENT_BINS)
    hist = hist.reshape(n, _ORIENT_BINS)
    total = hist.sum(axis=1)
    nonzero = total > 1e-12
    hist[nonzero] /= total[nonzero, None]
    hist[~nonzero] = 1.0 / _ORIENT_BINS

    feats = np.concatenate([means, stds, hist], axis=1).reshape(gh, gw, TOY_DIM)
    return PatchFeatureGrid(feats.astype(np.float32), source_id=source_id)


# --- backbone abstraction ---------------------------------------------------


class Backbone(abc.ABC):
    """Deterministic mapping from a preprocessed image to a patch feature grid.

    ``source_id`` identifies the (possibly rotated) input; file-based
    backbones resolve it to a stored feature file instead of looking at the
    pixels.  The pipeline appends ".rot<angle>" for rotated reference images.
    """

    name: str = ""
    dim: int = 0

    @abc.abstractmethod
    def extract(self, img: np.ndarray, source_id: str = "") -> PatchFeatureGrid:
        raise NotImplementedError


class ToyBackbone(Backbone):
    name = "toy"
    dim = TOY_DIM

    def extract(self, img: np.ndarray, source_id: str = "") -> PatchFeatureGrid:
        return toy_extract(img, source_id=source_id)


class FileBackbone(Backbone):
    """Looks up precomputed .pfv files by source id in a directory."""

    def __init__(self, root):
        self.root = str(root)
        self.name = f"file:{self.root}"
        self.dim = 0  # learned from the first file read

    def extract(self, img: np.ndarray, source_id: str = "") -> PatchFeatureGrid:
        from .pfv import read_feature_file

        if not source_id:
            raise InvalidInputError("file backbone requires a source_id to resolve")
        path = os.path.join(self.root, source_id + ".pfv")
        if not os.path.exists(path):
            raise InvalidInputError(f"no precomputed features for {source_id!r}: {path} missing")
        grid = read_feature_file(path)
        expected = (img.shape[0] // PATCH_PX, img.shape[1] // PATCH_PX)
        if (grid.grid_h, grid.grid_w) != expected:
            raise InvalidInputError(
                f"{path}: grid {grid.grid_h}x{grid.grid_w} does not match the "
                f"preprocessed image ({expected[0]}x{expected[1]} patches)"
            )
        if self.dim == 0:
            self.dim = grid.dim
        elif grid.dim != self.dim:
            raise InvalidInputError(f"{path}: dim {grid.dim} != previously seen {self.dim}")
        grid.source_id = source_id
        return grid


class ExternBackbone(Backbone):
    """Spawns a command that reads a preprocessed image file and writes a .pfv to stdout.

    The engine owns all geometry: the command receives a PNG whose dimensions
    are already multiples of 14 and must only extract features at that size.
    """

    def __init__(self, command: str):
        self.command = shlex.split(command)
        if not self.command:
            raise InvalidInputError("extern backbone command is empty")
        self.name = f"extern:{command}"
        self.dim = 0

    def extract(self, img: np.ndarray, source_id: str = "") -> PatchFeatureGrid:
        from .pfv import parse_feature_bytes

        img = _check_image(img)
        fd, tmp = tempfile.mkstemp(suffix=".png")
        try:
            os.close(fd)
            Image.fromarray(img).save(tmp, format="PNG")
            proc = subprocess.run(self.command + [tmp], capture_output=True)
            if proc.returncode != 0:
                raise InvalidInputError(
                    f"extern backbone exited {proc.returncode}: "
                    f"{proc.stderr.decode(errors='replace')[:500]}"
                )
            grid = parse_feature_bytes(proc.stdout)
        finally:
            os.unlink(tmp)
        expected = (img.shape[0] // PATCH_PX, img.shape[1] // PATCH_PX)
        if (grid.grid_h, grid.grid_w) != expected:
            raise InvalidInputError(
                f"extern backbone returned grid {grid.grid_h}x{grid.grid_w}, "
                f"expected {expected[0]}x{expected[1]}"
            )
        if self.dim == 0:
            self.dim = grid.dim
        grid.source_id = source_id
        return grid


def resolve_backbone(selector: str) -> Backbone:
    """Parse a backbone selector: "toy" | "file:<dir>" | "extern:<command>"."""
    if selector == "toy":
        return ToyBackbone()
    if selector.startswith("file:"):
        return FileBackbone(selector[len("file:") :])
    if selector.startswith("extern:"):
        return ExternBackbone(selector[len("extern:") :])
    raise InvalidInputError(
        f"unknown backbone selector {selector!r} (expected toy, file:<dir> or extern:<command>)"
    )
