"""Preprocessing geometry shared with the scoring engine.

Exporter and engine must agree exactly on the mapping from an input image
size to the emitted patch grid, so the rule is restated here rather than
imported: scale the smaller edge to the target resolution with the longer
edge rounded to the nearest integer (half up), resize bilinearly, then
center-crop both edges down to multiples of the 14-pixel patch size.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image

PATCH_PX = 14


def scaled_size(height: int, width: int, resolution: int) -> tuple[int, int]:
    """Post-resize size: smaller edge = resolution, longer edge rounded."""
    if height <= width:
        return resolution, int(math.floor(width * resolution / height + 0.5))
    return int(math.floor(height * resolution / width + 0.5)), resolution


def grid_shape(height: int, width: int, resolution: int) -> tuple[int, int]:
    """Patch grid emitted for an input of the given size."""
    sh, sw = scaled_size(height, width, resolution)
    return sh // PATCH_PX, sw // PATCH_PX


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def preprocess(img: np.ndarray, resolution: int) -> np.ndarray:
    """Resize and crop a uint8 RGB array to the patch-aligned geometry."""
    h, w = img.shape[:2]
    if h < PATCH_PX or w < PATCH_PX:
        raise ValueError(f"image {h}x{w} is smaller than one {PATCH_PX}x{PATCH_PX} patch")
    sh, sw = scaled_size(h, w, resolution)
    if (sh, sw) != (h, w):
        img = np.asarray(Image.fromarray(img).resize((sw, sh), Image.Resampling.BILINEAR))
    ch, cw = (sh // PATCH_PX) * PATCH_PX, (sw // PATCH_PX) * PATCH_PX
    top, left = (sh - ch) // 2, (sw - cw) // 2
    if (ch, cw) != (sh, sw):
        img = img[top : top + ch, left : left + cw]
    return np.ascontiguousarray(img)


def rotate90(img: np.ndarray, angle: int) -> np.ndarray:
    """Lossless counterclockwise right-angle rotation, matching the engine."""
    if angle % 90 != 0:
        raise ValueError(f"angle must be a multiple of 90, got {angle}")
    return np.ascontiguousarray(np.rot90(img, k=(angle % 360) // 90))
