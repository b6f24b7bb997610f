"""End-to-end orchestration: reference bank construction and test-image scoring.

This is the layer the CLI and the evaluation harness share.  It owns the
run-wide configuration (backbone selector, geometry, rotation and masking
policy, aggregation) and the once-per-category masking test, whose outcome is
stored in the bank metadata and reused for every test image.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateInputError, InvalidInputError
from .features import (
    Backbone,
    PatchFeatureGrid,
    PreprocessConfig,
    load_image,
    preprocess_image,
    resolve_backbone,
    rotate_image,
)
from .masking import (
    MaskPolicy,
    MaskTestResult,
    PatchMask,
    compute_mask,
    fit_pca_direction,
    masking_test,
    patch_mask,
    refine_mask,
    resolve_mask_mode,
)
from .memory import MemoryBank, build_bank, coreset_reduce, score_grid
from .scoring import AnomalyMap, PatchDistances, ScoreConfig, aggregate, make_map

LOGGER = logging.getLogger(__name__)

ROTATION_MODES = ("agnostic", "informed", "off")

# Built-in per-category policy for the standard industrial benchmark layouts:
# texture categories are never masked; a few object categories lack a
# canonical orientation, so informed rotation keeps augmenting those.
TEXTURE_CATEGORIES = frozenset({"carpet", "grid", "leather", "tile", "wood"})
INFORMED_ROTATION_CATEGORIES = frozenset({"hazelnut", "screw"})


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration for one pipeline run."""

    backbone: str = "toy"
    resolution: int = 448
    rotation_mode: str = "agnostic"
    rotation_angles: tuple[int, ...] = (0, 90, 180, 270)
    masking_mode: str = "auto"
    texture_flag: bool = False
    mask_references: bool = False
    shared_pca: bool = False
    aggregation: str = "mean_top_fraction"
    fraction: float = 0.01
    sigma: float = 4.0
    alpha: float = 0.001
    threads: int = 1
    coreset_target: int | None = None
    coreset_seed: int = 0
    category_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rotation_mode not in ROTATION_MODES:
            raise InvalidInputError(
                f"rotation_mode must be one of {ROTATION_MODES}, got {self.rotation_mode!r}"
            )
        if self.threads < 1:
            raise InvalidInputError(f"threads must be >= 1, got {self.threads}")
        # Fail fast on bad geometry or aggregation values.
        self.preprocess_config()
        self.score_config()

    def score_config(self) -> ScoreConfig:
        return ScoreConfig(aggregation=self.aggregation, fraction=self.fraction, sigma=self.sigma)

    def preprocess_config(self, category: str = "") -> PreprocessConfig:
        return PreprocessConfig(
            resolution=self.resolution,
            rotation_angles=self.rotation_angles,
            masking_mode=self.masking_mode,
            texture_flag=self.is_texture(category),
        )

    def _override(self, category: str, key: str):
        return self.category_overrides.get(category, {}).get(key)

    def is_texture(self, category: str) -> bool:
        override = self._override(category, "texture")
        if override is not None:
            return bool(override)
        return self.texture_flag or category in TEXTURE_CATEGORIES

    def informed_rotation(self, category: str) -> bool:
        override = self._override(category, "informed_rotation")
        if override is not None:
            return bool(override)
        return category in INFORMED_ROTATION_CATEGORIES

    def effective_angles(self, category: str = "") -> tuple[int, ...]:
        if self.rotation_mode == "off":
            return (0,)
        if self.rotation_mode == "informed" and not self.informed_rotation(category):
            return (0,)
        return self.rotation_angles

    def as_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "resolution": self.resolution,
            "rotation_mode": self.rotation_mode,
            "rotation_angles": list(self.rotation_angles),
            "masking_mode": self.masking_mode,
            "texture_flag": self.texture_flag,
            "mask_references": self.mask_references,
            "shared_pca": self.shared_pca,
            "aggregation": self.aggregation,
            "fraction": self.fraction,
            "sigma": self.sigma,
            "alpha": self.alpha,
            "threads": self.threads,
            "coreset_target": self.coreset_target,
            "coreset_seed": self.coreset_seed,
            "category_overrides": self.category_overrides,
        }


def resolve_threads(requested: int | None) -> int:
    """Requested thread count, PATCHBANK_THREADS, or available parallelism."""
    if requested is not None and requested >= 1:
        return requested
    env = os.environ.get("PATCHBANK_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise InvalidInputError(f"PATCHBANK_THREADS must be an integer, got {env!r}") from exc
        if n >= 1:
            return n
    return os.cpu_count() or 1


def _stem(path) -> str:
    return os.path.splitext(os.path.basename(str(path)))[0]


def _rotated_source_id(stem: str, angle: int) -> str:
    return stem if angle == 0 else f"{stem}.rot{angle}"


@dataclass
class ReferenceBundle:
    """Everything produced while ingesting the reference images."""

    bank: MemoryBank
    grids: list[PatchFeatureGrid]  # unrotated reference grids
    masking_on: bool
    test_result: MaskTestResult | None
    direction: np.ndarray | None  # shared PCA direction when configured
    build_seconds: float


def build_reference_bank(
    ref_paths: list,
    cfg: RunConfig,
    category: str = "",
    backbone: Backbone | None = None,
    policy: MaskPolicy = MaskPolicy(),
    source_ids: list[str] | None = None,
) -> ReferenceBundle:
    """Ingest reference images into a memory bank.

    Rotation augmentation follows cfg.rotation_mode (informed mode consults
    the per-category policy).  The masking test runs once, on the first
    reference image, and its outcome plus diagnostics land in the bank
    metadata so scoring reuses the decision.

    Args:
        source_ids: explicit per-path ids for feature lookup and metadata;
            defaults to the file stems.  Callers scoring a whole dataset
            pass ids qualified by the path inside it, so file-based
            backbones never mix up same-named images from different splits.
    """
    if not ref_paths:
        raise InvalidInputError("need at least one reference image")
    if source_ids is not None and len(source_ids) != len(ref_paths):
        raise InvalidInputError(
            f"source_ids has {len(source_ids)} entries for {len(ref_paths)} paths"
        )
    backbone = backbone or resolve_backbone(cfg.backbone)
    pcfg = cfg.preprocess_config(category)
    angles = cfg.effective_angles(category)

    t0 = time.perf_counter()
    base_grids: list[PatchFeatureGrid] = []
    all_grids: list[PatchFeatureGrid] = []
    for idx, path in enumerate(ref_paths):
        img = preprocess_image(load_image(path), pcfg)
        stem = source_ids[idx] if source_ids is not None else _stem(path)
        for angle in angles:
            rotated = rotate_image(img, angle) if angle else img
            grid = backbone.extract(rotated, source_id=_rotated_source_id(stem, angle))
            if angle == 0:
                base_grids.append(grid)
            all_grids.append(grid)

    test_result: MaskTestResult | None = None
    test_error = ""
    if pcfg.masking_mode == "auto" and not pcfg.texture_flag:
        try:
            first = base_grids[0]
            direction0 = fit_pca_direction([first], center_fraction=policy.center_fraction)
            mask0 = refine_mask(patch_mask(first, direction0), policy)
            test_result = masking_test(mask0, policy)
        except DegenerateInputError as exc:
            test_error = str(exc)
            LOGGER.warning("masking test skipped: %s", exc)
    masking_on = resolve_mask_mode(pcfg, test_result)

    direction = None
    if masking_on and cfg.shared_pca:
        direction = fit_pca_direction(base_grids, center_fraction=policy.center_fraction)

    masks = None
    if masking_on and cfg.mask_references:
        masks = [
            refine_mask(patch_mask(g, direction), policy)
            if direction is not None
            else compute_mask(g, policy)
            for g in all_grids
        ]

    meta = {
        "category": category,
        "shots": len(ref_paths),
        "rotation_angles": list(angles),
        "rotation_mode": cfg.rotation_mode,
        "backbone": backbone.name,
        "resolution": cfg.resolution,
        "masking": "on" if masking_on else "off",
        "masking_mode": pcfg.masking_mode,
        "texture": pcfg.texture_flag,
        "masking_test": test_result.as_dict() if test_result else None,
        "mask_policy": {
            "center_fraction": policy.center_fraction,
            "center_fg_min": policy.center_fg_min,
            "global_fg_max": policy.global_fg_max,
            "dilation_se": policy.dilation_se,
            "closing_se": policy.closing_se,
        },
        "sources": source_ids if source_ids is not None else [_stem(p) for p in ref_paths],
    }
    if test_error:
        meta["masking_test_error"] = test_error
    if direction is not None:
        meta["shared_pca_direction"] = [float(x) for x in direction]

    bank = build_bank(all_grids, meta, masks=masks)
    if cfg.coreset_target is not None:
        bank = coreset_reduce(bank, cfg.coreset_target, seed=cfg.coreset_seed)
    return ReferenceBundle(
        bank=bank,
        grids=base_grids,
        masking_on=masking_on,
        test_result=test_result,
        direction=direction,
        build_seconds=time.perf_counter() - t0,
    )


@dataclass
class ScoredImage:
    source_id: str
    score: float
    distances: PatchDistances
    amap: AnomalyMap | None
    mask: PatchMask | None
    pre_h: int
    pre_w: int


def bank_direction(bank: MemoryBank) -> np.ndarray | None:
    direction = bank.meta.get("shared_pca_direction")
    if direction is None:
        return None
    return np.asarray(direction, dtype=np.float64)


def score_image(
    img_or_path,
    bank: MemoryBank,
    cfg: RunConfig,
    backbone: Backbone | None = None,
    policy: MaskPolicy = MaskPolicy(),
    with_map: bool = True,
    source_id: str = "",
) -> ScoredImage:
    """Score one test image against a built bank.

    Masking follows the decision stored in the bank metadata: when on, the
    mask is fitted on the test image's own features (or projected with the
    bank's shared direction when one was stored).  Test images are never
    rotated.
    """
    backbone = backbone or resolve_backbone(cfg.backbone)
    if isinstance(img_or_path, np.ndarray):
        img = img_or_path
    else:
        img = load_image(img_or_path)
        source_id = source_id or _stem(img_or_path)
    category = str(bank.meta.get("category", ""))
    pre = preprocess_image(img, cfg.preprocess_config(category))
    grid = backbone.extract(pre, source_id=source_id)

    mask = None
    if bank.meta.get("masking") == "on":
        direction = bank_direction(bank)
        try:
            if direction is not None:
                mask = refine_mask(patch_mask(grid, direction), policy)
            else:
                mask = compute_mask(grid, policy)
        except DegenerateInputError:
            LOGGER.warning("mask fit degenerate for %s; scoring unmasked", source_id)
            mask = None
        if mask is not None and not mask.bits.any():
            LOGGER.warning("mask for %s excluded everything; scoring unmasked", source_id)
            mask = None

    d = score_grid(grid, bank, mask=mask, threads=cfg.threads)
    score = aggregate(d, cfg.score_config())
    amap = None
    if with_map:
        amap = make_map(d, pre.shape[0], pre.shape[1], cfg.score_config())
    return ScoredImage(
        source_id=source_id,
        score=score,
        distances=d,
        amap=amap,
        mask=mask,
        pre_h=pre.shape[0],
        pre_w=pre.shape[1],
    )
