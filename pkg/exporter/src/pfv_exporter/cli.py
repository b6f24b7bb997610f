"""Command line entry point for the feature exporter."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backbones import EMBED_DIMS, ExtractorError
from .export import ExportError, ExportManifest, export_features, verify_manifest

LOGGER = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfv-export",
        description="Export patch features from images to .pfv files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export", help="run the backbone over a folder of images")
    exp.add_argument("--images", required=True, help="image folder, scanned recursively")
    exp.add_argument("--backbone", choices=sorted(EMBED_DIMS), default="small")
    exp.add_argument("--resolution", type=int, choices=(448, 672), default=448)
    exp.add_argument("--out", required=True, help="output folder for .pfv files")
    exp.add_argument(
        "--stub",
        action="store_true",
        help="use the deterministic offline extractor instead of pretrained weights",
    )
    exp.add_argument(
        "--rotations",
        default="",
        help="comma separated right angles to export in addition to 0, e.g. 90,180,270",
    )
    exp.add_argument(
        "--exclude",
        action="append",
        default=None,
        metavar="NAME",
        help="directory name to skip (repeatable; default: ground_truth, masks)",
    )

    ver = sub.add_parser("verify", help="re-checksum an export against its manifest")
    ver.add_argument("--out", required=True, help="export folder to verify")
    ver.add_argument("--manifest", default=None, help="manifest path (default: <out>/manifest.json)")
    return parser


def _parse_rotations(text: str) -> tuple[int, ...]:
    if not text.strip():
        return (0,)
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ExportError(f"bad --rotations value {text!r}: {exc}") from None


def _cmd_export(args) -> int:
    from .export import DEFAULT_EXCLUDE

    exclude = tuple(args.exclude) if args.exclude else DEFAULT_EXCLUDE
    manifest = export_features(
        args.images,
        args.backbone,
        args.resolution,
        args.out,
        rotations=_parse_rotations(args.rotations),
        stub=args.stub,
        exclude=exclude,
    )
    print(
        f"exported {len(manifest.files)} files "
        f"({len(manifest.errors)} skipped) to {args.out}"
    )
    for entry in manifest.errors:
        print(f"  skipped {entry['source']}: {entry['error']}", file=sys.stderr)
    return 0


def _cmd_verify(args) -> int:
    manifest = None
    if args.manifest:
        data = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        manifest = ExportManifest.from_dict(data)
    result = verify_manifest(args.out, manifest)
    print(f"ok {len(result.ok)}, missing {len(result.missing)}, mismatched {len(result.mismatched)}")
    for stem in result.missing:
        print(f"  missing {stem}", file=sys.stderr)
    for stem in result.mismatched:
        print(f"  mismatched {stem}", file=sys.stderr)
    return 0 if result.passed else 1


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "export":
            return _cmd_export(args)
        return _cmd_verify(args)
    except (ExportError, ExtractorError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
