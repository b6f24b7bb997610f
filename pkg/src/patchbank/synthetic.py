"""Deterministic synthetic benchmark data for end-to-end checks.

Two 448x448 categories, written as an on-disk tree in the industrial
benchmark layout (train/good, test/good, test/defect, ground_truth/defect):

* ``plates``: a dark disk centered on a lighter noisy background.  The disk
  fills the central crop, so the foreground masking test passes and the
  background is excluded.  Anomalies are inserted squares placed on the
  disk, with fills chosen to keep roughly the disk's brightness (so the
  foreground mask retains them) while shifting color, contrast or gradient
  statistics.

* ``weave``: a vertical stripe texture with fixed phase.  The stripes make
  the first principal direction a left-right brightness split, which fails
  the masking test, so automatic masking turns itself off.  Anomalies
  replace a square with a different color, a flat fill, or stripes at a
  different orientation; right-angle rotations of the nominal pattern stay
  axis-aligned, hence diagonal inserts remain distant under rotation
  augmentation.

Every anomalous image carries exactly one rectangular defect and a matching
binary ground-truth mask.  Per-image randomness is drawn from seeds spawned
per (category, split, index), so output bytes depend only on the fixture
seed, not on generation order.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

LOGGER = logging.getLogger(__name__)

SIZE = 448
N_TRAIN = 16
N_NOMINAL = 20
N_ANOMALOUS = 20

_PLATE_BG = 0.82
_PLATE_FG = 0.35
_DISK_RADIUS = 170.0
_NOISE_SIGMA = 0.02

# Fill styles whose mean brightness stays near the disk's, so a
# brightness-based foreground mask keeps the defect in play.
PLATES_ANOMALIES = ("red", "green", "blue", "dark", "checker", "diag", "hstripes")
WEAVE_ANOMALIES = ("red", "green", "blue", "flat", "diag", "bright", "dark")


def _to_png(path: Path, img: np.ndarray) -> None:
    arr = np.clip(img * 255.0 + 0.5, 0.0, 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    y, x = np.mgrid[0:size, 0:size]
    return y.astype(np.float64), x.astype(np.float64)


def _plate_image(rng: np.random.Generator, size: int = SIZE) -> np.ndarray:
    y, x = _coords(size)
    c = (size - 1) / 2.0
    radius = (_DISK_RADIUS + rng.uniform(-6.0, 6.0)) * (size / SIZE)
    disk = (y - c) ** 2 + (x - c) ** 2 <= radius**2
    base = _PLATE_BG + rng.uniform(-0.02, 0.02)
    fg = _PLATE_FG + rng.uniform(-0.02, 0.02)
    img = np.full((size, size, 3), base, dtype=np.float64)
    img[disk] = fg
    img += rng.normal(0.0, _NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _weave_image(rng: np.random.Generator, size: int = SIZE) -> np.ndarray:
    y, x = _coords(size)
    # Fixed-phase vertical stripes; nominal variation is brightness + noise.
    stripes = 0.5 + 0.16 * np.sin(2.0 * np.pi * x / 28.0)
    img = np.stack([stripes * 0.9, stripes, stripes * 0.75], axis=-1)
    img += rng.uniform(-0.02, 0.02)
    img += rng.normal(0.0, _NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _fill_patch(kind: str, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    y, x = _coords(max(h, w))
    y, x = y[:h, :w], x[:h, :w]
    if kind == "red":
        flat = (0.75, 0.15, 0.15)
    elif kind == "green":
        flat = (0.15, 0.70, 0.20)
    elif kind == "blue":
        flat = (0.15, 0.25, 0.75)
    elif kind == "dark":
        flat = (0.12, 0.12, 0.12)
    elif kind == "bright":
        flat = (0.92, 0.92, 0.88)
    elif kind == "flat":
        flat = (0.45, 0.50, 0.38)
    elif kind == "checker":
        g = np.where(((y // 7).astype(int) + (x // 7).astype(int)) % 2 == 0, 0.18, 0.55)
        return np.stack([g, g, g], axis=-1)
    elif kind == "diag":
        g = 0.35 + 0.16 * np.sin(2.0 * np.pi * (x + y) / 20.0)
        return np.stack([g, g, g], axis=-1)
    elif kind == "hstripes":
        g = 0.35 + 0.16 * np.sin(2.0 * np.pi * y / 8.0)
        return np.stack([g, g, g], axis=-1)
    else:
        raise ValueError(f"unknown anomaly kind {kind!r}")
    out = np.empty((h, w, 3), dtype=np.float64)
    out[:] = flat
    return out


def _insert_anomaly(
    img: np.ndarray,
    rng: np.random.Generator,
    kind: str,
    center_box: tuple[int, int, int, int],
) -> np.ndarray:
    """Paste one square defect; returns the boolean ground-truth mask."""
    size = img.shape[0]
    lo = max(3, int(round(21.0 * size / SIZE)))
    hi = max(lo + 1, int(round(33.0 * size / SIZE)))
    half = int(rng.integers(lo, hi))
    y0_min, y0_max, x0_min, x0_max = center_box
    cy = int(rng.integers(y0_min, y0_max + 1))
    cx = int(rng.integers(x0_min, x0_max + 1))
    top, left = cy - half, cx - half
    h = w = 2 * half
    patch = _fill_patch(kind, (h, w), rng)
    patch = patch + rng.normal(0.0, _NOISE_SIGMA, size=patch.shape)
    img[top : top + h, left : left + w] = np.clip(patch, 0.0, 1.0)
    mask = np.zeros((size, size), dtype=bool)
    mask[top : top + h, left : left + w] = True
    return mask


def _center_box_plates(size: int) -> tuple[int, int, int, int]:
    # Keep the whole square on the disk: |center offset| + half*sqrt(2) < radius.
    c = size // 2
    r = max(1, int(104.0 * size / SIZE))
    return (c - r, c + r, c - r, c + r)


def _center_box_weave(size: int) -> tuple[int, int, int, int]:
    m = max(1, int(53.0 * size / SIZE))  # max defect half-size + margin, scaled
    return (m, size - 1 - m, m, size - 1 - m)


def _rng_for(seed: int, category: str, split: str, index: int) -> np.random.Generator:
    name = f"{category}/{split}/{index}".encode()
    return np.random.default_rng(np.random.SeedSequence((seed, int.from_bytes(name, "big"))))


_CATEGORIES = {
    "plates": (_plate_image, PLATES_ANOMALIES, _center_box_plates),
    "weave": (_weave_image, WEAVE_ANOMALIES, _center_box_weave),
}


def generate_benchmark(
    root,
    seed: int = 0,
    n_train: int = N_TRAIN,
    n_nominal: int = N_NOMINAL,
    n_anomalous: int = N_ANOMALOUS,
    size: int = SIZE,
    categories: tuple[str, ...] | None = None,
) -> Path:
    """Write the benchmark tree under root; returns root.

    Idempotent for a fixed seed: regenerating produces identical bytes.
    categories defaults to all of them.
    """
    root = Path(root)
    for category in categories or tuple(_CATEGORIES):
        if category not in _CATEGORIES:
            raise ValueError(f"unknown category {category!r}; have {sorted(_CATEGORIES)}")
        make_image, kinds, center_box = _CATEGORIES[category]
        cat = root / category
        (cat / "train" / "good").mkdir(parents=True, exist_ok=True)
        (cat / "test" / "good").mkdir(parents=True, exist_ok=True)
        (cat / "test" / "defect").mkdir(parents=True, exist_ok=True)
        (cat / "ground_truth" / "defect").mkdir(parents=True, exist_ok=True)

        for i in range(n_train):
            rng = _rng_for(seed, category, "train", i)
            _to_png(cat / "train" / "good" / f"{i:03d}.png", make_image(rng, size))
        for i in range(n_nominal):
            rng = _rng_for(seed, category, "test_good", i)
            _to_png(cat / "test" / "good" / f"{i:03d}.png", make_image(rng, size))
        for i in range(n_anomalous):
            rng = _rng_for(seed, category, "test_defect", i)
            img = make_image(rng, size)
            kind = kinds[i % len(kinds)]
            mask = _insert_anomaly(img, rng, kind, center_box(size))
            _to_png(cat / "test" / "defect" / f"{i:03d}.png", img)
            Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(
                cat / "ground_truth" / "defect" / f"{i:03d}_mask.png"
            )
        LOGGER.info("generated %s: %d train, %d+%d test", category, n_train, n_nominal, n_anomalous)
    return root


def write_separable_fixture(
    root,
    n_train: int = 3,
    n_nominal: int = 4,
    n_anomalous: int = 4,
    size: int = 112,
) -> Path:
    """Tiny perfectly-separable tree: constant red images, green square defects.

    Every nominal image is bit-identical to the references, so nominal patch
    distances are exactly zero and image-level ranking is perfect by
    construction.
    """
    root = Path(root)
    cat = root / "separable"
    (cat / "train" / "good").mkdir(parents=True, exist_ok=True)
    (cat / "test" / "good").mkdir(parents=True, exist_ok=True)
    (cat / "test" / "defect").mkdir(parents=True, exist_ok=True)
    (cat / "ground_truth" / "defect").mkdir(parents=True, exist_ok=True)

    red = np.zeros((size, size, 3), dtype=np.float64)
    red[..., 0] = 0.8
    for i in range(n_train):
        _to_png(cat / "train" / "good" / f"{i:03d}.png", red)
    for i in range(n_nominal):
        _to_png(cat / "test" / "good" / f"{i:03d}.png", red)
    side = size // 4
    for i in range(n_anomalous):
        img = red.copy()
        top = (i * 11) % (size - side)
        left = (i * 23) % (size - side)
        img[top : top + side, left : left + side] = (0.1, 0.8, 0.15)
        mask = np.zeros((size, size), dtype=bool)
        mask[top : top + side, left : left + side] = True
        _to_png(cat / "test" / "defect" / f"{i:03d}.png", img)
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(
            cat / "ground_truth" / "defect" / f"{i:03d}_mask.png"
        )
    return root
