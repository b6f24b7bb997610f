"""Folder export: one .pfv per image, a manifest with checksums, and re-verification."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .backbones import EMBED_DIMS, make_extractor
from .geometry import PATCH_PX, grid_shape, load_rgb, preprocess, rotate90
from .pfv_io import feature_bytes

LOGGER = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# Directory names skipped during the recursive scan: ground-truth masks in
# the common dataset layouts are images too, but must never be exported.
DEFAULT_EXCLUDE = ("ground_truth", "masks")

MANIFEST_NAME = "manifest.json"

RIGHT_ANGLES = (0, 90, 180, 270)


class ExportError(ValueError):
    """Invalid export request or unusable image folder."""


@dataclass
class ExportedFile:
    stem: str  # output file name without the .pfv suffix
    source: str  # image path relative to the scanned root
    angle: int
    grid: tuple[int, int]
    sha256: str
    n_bytes: int


@dataclass
class ExportManifest:
    backbone: str
    extractor: str
    dim: int
    resolution: int
    rotations: tuple[int, ...]
    patch_px: int = PATCH_PX
    files: list[ExportedFile] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "format_version": 1,
            "backbone": self.backbone,
            "extractor": self.extractor,
            "dim": self.dim,
            "resolution": self.resolution,
            "rotations": list(self.rotations),
            "patch_px": self.patch_px,
            "files": [
                {**dataclasses.asdict(f), "grid": list(f.grid)} for f in self.files
            ],
            "errors": self.errors,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExportManifest":
        files = [
            ExportedFile(
                stem=f["stem"],
                source=f["source"],
                angle=int(f["angle"]),
                grid=(int(f["grid"][0]), int(f["grid"][1])),
                sha256=f["sha256"],
                n_bytes=int(f["n_bytes"]),
            )
            for f in data.get("files", [])
        ]
        return cls(
            backbone=data["backbone"],
            extractor=data.get("extractor", data["backbone"]),
            dim=int(data["dim"]),
            resolution=int(data["resolution"]),
            rotations=tuple(int(a) for a in data.get("rotations", (0,))),
            patch_px=int(data.get("patch_px", PATCH_PX)),
            files=files,
            errors=list(data.get("errors", [])),
        )


def flat_stem(rel_path: Path) -> str:
    """Root-relative path as a flat file stem: parts joined with "__".

    Matches the engine's dataset-qualified source ids, so one export of a
    dataset tree serves a whole evaluation without stem collisions between
    splits or categories.
    """
    return "__".join(rel_path.with_suffix("").parts)


def list_images(image_dir, exclude=DEFAULT_EXCLUDE) -> list[Path]:
    """All image files under image_dir, sorted, skipping excluded directory names."""
    root = Path(image_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory {root} does not exist")
    skip = {name.lower() for name in exclude}
    found = []
    for path in root.rglob("*"):
        if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        rel = path.relative_to(root)
        if any(part.lower() in skip for part in rel.parts[:-1]):
            continue
        found.append(path)
    return sorted(found, key=lambda p: p.relative_to(root).as_posix())


def _normalize_rotations(rotations) -> tuple[int, ...]:
    angles = {int(a) % 360 for a in rotations} | {0}
    bad = angles - set(RIGHT_ANGLES)
    if bad:
        raise ExportError(f"rotations must be right angles, got {sorted(bad)}")
    return tuple(sorted(angles))


def export_features(
    image_dir,
    backbone_id: str,
    resolution: int,
    out_dir,
    rotations=(0,),
    stub: bool = False,
    extractor=None,
    exclude=DEFAULT_EXCLUDE,
) -> ExportManifest:
    """Export every image under image_dir to one .pfv per (image, angle).

    Unrotated files are named ``<stem>.pfv``; rotated variants append the
    engine's ``.rot<angle>`` convention, letting rotation-augmented banks
    read from the same directory.  Unreadable images are recorded in the
    manifest's error list and skipped; geometry or write failures abort.

    Args:
        rotations: right angles to export; 0 is always included.
        stub: use the deterministic offline extractor instead of pretrained
            weights (ignored when an explicit extractor is given).
        extractor: object with ``name``, ``dim`` and ``features(img)``;
            overrides backbone_id/stub selection.

    Returns:
        The manifest, also written to ``<out_dir>/manifest.json``.
    """
    if backbone_id not in EMBED_DIMS:
        raise ExportError(f"unknown backbone {backbone_id!r} (expected {sorted(EMBED_DIMS)})")
    if resolution < PATCH_PX or resolution % PATCH_PX != 0:
        raise ExportError(f"resolution must be a positive multiple of {PATCH_PX}, got {resolution}")
    angles = _normalize_rotations(rotations)
    images = list_images(image_dir, exclude=exclude)
    if not images:
        raise ExportError(f"no images found under {image_dir}")

    root = Path(image_dir)
    stems = {}
    for path in images:
        stem = flat_stem(path.relative_to(root))
        if stem in stems:
            raise ExportError(
                f"stem {stem!r} is ambiguous: {stems[stem]} and {path.relative_to(root)}"
            )
        stems[stem] = path.relative_to(root)

    extractor = extractor or make_extractor(backbone_id, stub=stub)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = ExportManifest(
        backbone=backbone_id,
        extractor=extractor.name,
        dim=extractor.dim,
        resolution=resolution,
        rotations=angles,
    )

    for path in images:
        rel = path.relative_to(root)
        try:
            img = load_rgb(path)
            pre = preprocess(img, resolution)
        except Exception as exc:
            LOGGER.warning("skipping %s: %s", rel, exc)
            manifest.errors.append({"source": rel.as_posix(), "error": str(exc)})
            continue
        expected = grid_shape(img.shape[0], img.shape[1], resolution)
        stem = flat_stem(rel)
        for angle in angles:
            rotated = rotate90(pre, angle) if angle else pre
            feats = extractor.features(rotated)
            want = expected if angle in (0, 180) else (expected[1], expected[0])
            if feats.shape[:2] != want:
                raise ExportError(
                    f"{rel}: extractor produced grid {feats.shape[:2]}, expected {want}"
                )
            name = stem if angle == 0 else f"{stem}.rot{angle}"
            data = feature_bytes(feats, name, extractor.name, resolution)
            (out / f"{name}.pfv").write_bytes(data)
            manifest.files.append(
                ExportedFile(
                    stem=name,
                    source=rel.as_posix(),
                    angle=angle,
                    grid=(feats.shape[0], feats.shape[1]),
                    sha256=hashlib.sha256(data).hexdigest(),
                    n_bytes=len(data),
                )
            )

    (out / MANIFEST_NAME).write_text(manifest.to_json() + "\n", encoding="utf-8")
    return manifest


@dataclass
class VerifyResult:
    ok: list[str]
    missing: list[str]
    mismatched: list[str]

    @property
    def passed(self) -> bool:
        return not self.missing and not self.mismatched


def verify_manifest(out_dir, manifest: ExportManifest | None = None) -> VerifyResult:
    """Re-checksum every exported file against the manifest."""
    out = Path(out_dir)
    if manifest is None:
        path = out / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"no manifest at {path}")
        manifest = ExportManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
    result = VerifyResult(ok=[], missing=[], mismatched=[])
    for entry in manifest.files:
        path = out / f"{entry.stem}.pfv"
        if not path.exists():
            result.missing.append(entry.stem)
            continue
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        (result.ok if digest == entry.sha256 else result.mismatched).append(entry.stem)
    return result
