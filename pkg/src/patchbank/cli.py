"""Command-line surface: build-bank, score, eval, batched, bench, mask-test.

Configuration precedence: built-in defaults < JSON config file (--config) <
explicit command-line flags.  Every output file embeds the resolved config,
so a report alone suffices to rerun the command.

Exit codes: 0 success, 2 usage/config error, 3 I/O error, 4 data-format
error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import kernels
from .batched import BatchedConfig, batched_run
from .bench import parse_axis, run_bench
from .errors import FormatError, PatchbankError
from .evaluation import IMAGE_SUFFIXES, METRIC_NAMES, load_dataset, run_fewshot_eval
from .features import load_image, preprocess_image, resolve_backbone
from .masking import (
    MaskPolicy,
    compute_mask,
    masking_test,
    save_mask_png,
)
from .memory import load_bank, save_bank
from .pipeline import RunConfig, build_reference_bank, resolve_threads, score_image
from .scoring import export_heatmap

LOGGER = logging.getLogger(__name__)

_RUNCONFIG_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}

_AGG_ALIASES = {
    "mean-top": "mean_top_fraction",
    "max-patch": "max_patch",
    "max-map": "max_map",
}


class _ConfigError(PatchbankError):
    pass


def parse_agg(spec: str) -> tuple[str, float | None]:
    """Parse an aggregation flag: mean-top[:fraction] | max-patch | max-map."""
    name, _, frac = spec.partition(":")
    if name not in _AGG_ALIASES:
        raise _ConfigError(
            f"aggregation must be one of {sorted(_AGG_ALIASES)} (got {spec!r})"
        )
    if frac and name != "mean-top":
        raise _ConfigError(f"only mean-top takes a fraction (got {spec!r})")
    fraction = None
    if frac:
        try:
            fraction = float(frac)
        except ValueError:
            raise _ConfigError(f"bad fraction in {spec!r}") from None
    return _AGG_ALIASES[name], fraction


def _config_overrides(args: argparse.Namespace) -> dict:
    """Collect RunConfig overrides from flags the user actually set."""
    out: dict = {}
    mapping = {
        "backbone": "backbone",
        "resolution": "resolution",
        "rotations": "rotation_mode",
        "masking": "masking_mode",
        "texture": "texture_flag",
        "mask_references": "mask_references",
        "shared_pca": "shared_pca",
        "alpha": "alpha",
        "coreset": "coreset_target",
        "coreset_seed": "coreset_seed",
    }
    for flag, field in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[field] = value
    agg = getattr(args, "agg", None)
    if agg is not None:
        name, fraction = parse_agg(agg)
        out["aggregation"] = name
        if fraction is not None:
            out["fraction"] = fraction
    return out


def build_run_config(args: argparse.Namespace, defaults: dict | None = None) -> RunConfig:
    """Resolve a RunConfig: defaults < JSON config file < explicit flags."""
    file_cfg: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise _ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise _ConfigError(f"config file {path} must hold a JSON object")
    merged = {**(defaults or {}), **file_cfg, **_config_overrides(args)}
    # informational echo keys, not RunConfig fields
    for key in ("k", "seeds", "bank", "mode"):
        merged.pop(key, None)
    unknown = set(merged) - _RUNCONFIG_FIELDS
    if unknown:
        raise _ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "rotation_angles" in merged:
        merged["rotation_angles"] = tuple(int(a) for a in merged["rotation_angles"])
    merged["threads"] = resolve_threads(
        getattr(args, "threads", None) or merged.get("threads")
    )
    return RunConfig(**merged)


def _expand_images(paths: list[str], flag: str) -> list[Path]:
    """Expand files/directories into a sorted image list; errors name paths."""
    out: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            out.extend(
                q for q in sorted(p.iterdir())
                if q.is_file() and q.suffix.lower() in IMAGE_SUFFIXES
            )
        elif p.is_file():
            out.append(p)
        else:
            raise FileNotFoundError(f"{flag} path does not exist: {p}")
    return sorted(out)


def _map_stems(inputs: list[Path]) -> list[str]:
    """Unique per-input map stems; repeated stems get _2, _3, ... suffixes."""
    seen: dict[str, int] = {}
    out = []
    for p in inputs:
        n = seen.get(p.stem, 0) + 1
        seen[p.stem] = n
        out.append(p.stem if n == 1 else f"{p.stem}_{n}")
    return out


def _write_score_csv(path, rows: list[tuple], cfg_echo: dict, with_maps: bool) -> None:
    header = "path,score,map" if with_maps else "path,score"
    lines = [f"# config={json.dumps(cfg_echo, sort_keys=True)}", header]
    for row in rows:
        lines.append(",".join(str(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


# --- subcommands ----------------------------------------------------------------


def cmd_build_bank(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    refs = _expand_images(args.refs, "--refs")
    if not refs:
        raise _ConfigError(f"no reference images found under {args.refs}")
    bundle = build_reference_bank(refs, cfg, category=args.category or "")
    bundle.bank.meta["config"] = cfg.as_dict()
    save_bank(bundle.bank, args.out)
    test = bundle.bank.meta.get("masking_test")
    print(
        f"wrote {args.out}: {bundle.bank.count} rows, dim {bundle.bank.dim}, "
        f"masking {bundle.bank.meta['masking']}"
        + (f" (test: {json.dumps(test, sort_keys=True)})" if test else "")
    )
    return 0


def _emit_scores(args, rows, cfg_echo, with_maps) -> None:
    for row in rows:
        print(",".join(str(x) for x in row))
    if getattr(args, "csv", None):
        _write_score_csv(args.csv, rows, cfg_echo, with_maps)


def cmd_score(args: argparse.Namespace) -> int:
    bank = load_bank(args.bank)
    defaults = {}
    if "backbone" in bank.meta:
        defaults["backbone"] = str(bank.meta["backbone"])
    if "resolution" in bank.meta:
        defaults["resolution"] = int(bank.meta["resolution"])
    cfg = build_run_config(args, defaults)
    inputs = _expand_images(args.inputs, "--inputs")
    if not inputs:
        LOGGER.warning("no input images found; nothing to score")
        return 0
    backbone = resolve_backbone(cfg.backbone)
    maps_dir = Path(args.maps) if args.maps else None
    if maps_dir:
        maps_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    stems = _map_stems(inputs)
    for path, stem in zip(inputs, stems):
        scored = score_image(path, bank, cfg, backbone=backbone, with_map=maps_dir is not None)
        if maps_dir:
            out_png = maps_dir / f"{stem}.heat.png"
            raw = (maps_dir / f"{stem}.map.pfv") if args.raw_maps else None
            export_heatmap(scored.amap, args.heat_normalizer, out_png, raw_path=raw)
            rows.append((path, f"{scored.score:.9g}", out_png))
        else:
            rows.append((path, f"{scored.score:.9g}"))
    _emit_scores(args, rows, {**cfg.as_dict(), "bank": str(args.bank)}, maps_dir is not None)
    return 0


def cmd_batched(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    inputs = _expand_images(args.inputs, "--inputs")
    if len(inputs) < 2:
        raise _ConfigError(
            f"mutual scoring needs at least two images, got {len(inputs)}; "
            "each image is scored against the others' patches"
        )
    backbone = resolve_backbone(cfg.backbone)
    pcfg = cfg.preprocess_config()
    grids = []
    shapes = []
    for path in inputs:
        pre = preprocess_image(load_image(path), pcfg)
        grids.append(backbone.extract(pre, source_id=path.stem))
        shapes.append(pre.shape[:2])
    masks = None
    if cfg.masking_mode == "on":
        policy = MaskPolicy()
        masks = [compute_mask(g, policy) for g in grids]
    bcfg = BatchedConfig(alpha=cfg.alpha, aggregation=cfg.score_config())
    maps_dir = Path(args.maps) if args.maps else None
    if maps_dir:
        maps_dir.mkdir(parents=True, exist_ok=True)
    scores, amaps = batched_run(
        grids, bcfg, masks=masks, threads=cfg.threads, with_maps=maps_dir is not None
    )
    rows = []
    stems = _map_stems(inputs)
    for i, path in enumerate(inputs):
        if maps_dir:
            out_png = maps_dir / f"{stems[i]}.heat.png"
            export_heatmap(amaps[i], args.heat_normalizer, out_png)
            rows.append((path, f"{scores[i]:.9g}", out_png))
        else:
            rows.append((path, f"{scores[i]:.9g}"))
    _emit_scores(args, rows, {**cfg.as_dict(), "mode": "batched"}, maps_dir is not None)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    index = load_dataset(args.root, layout=args.layout)
    shots = [int(s) for s in args.shots.split(",") if s.strip()]
    if not shots:
        raise _ConfigError(f"--shots has no values: {args.shots!r}")
    categories = args.categories.split(",") if args.categories else None
    sections = []
    csv_parts = []
    for k in shots:
        report = run_fewshot_eval(
            index, k, seeds=args.seeds, cfg=cfg, categories=categories,
            pro_thresholds=args.pro_thresholds,
        )
        sections.append(json.loads(report.to_json()))
        csv_parts.append(report.to_csv())
        _print_eval_section(report, k)
    if all(not s["rows"] for s in sections):
        print("error: every category was skipped; nothing evaluated", file=sys.stderr)
        return 2
    if args.out_json:
        Path(args.out_json).write_text(
            json.dumps({"sections": sections}, indent=2, sort_keys=True) + "\n"
        )
    if args.out_csv:
        header, *_ = csv_parts[0].splitlines()
        body = [header]
        for part in csv_parts:
            body.extend(part.splitlines()[1:])
        Path(args.out_csv).write_text("\n".join(body) + "\n")
    return 0


def _print_eval_section(report, k: int) -> None:
    print(f"== k={k} ==")
    width = max([len(r.category) for r in report.rows] + [4])
    print(f"{'category':<{width}}  " + "  ".join(f"{n:>12}" for n in METRIC_NAMES))
    for r in report.rows:
        cells = "  ".join(f"{r.metrics[n]['mean']:>12.4f}" for n in METRIC_NAMES)
        print(f"{r.category:<{width}}  {cells}")
    if report.rows:
        mean = report.mean_row(k)
        cells = "  ".join(f"{mean[n]:>12.4f}" for n in METRIC_NAMES)
        print(f"{'mean':<{width}}  {cells}")
    for s in report.skipped:
        print(f"skipped {s['category']}: {s['reason']}")


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    refs = _expand_images(args.refs, "--refs")
    if not refs:
        raise _ConfigError(f"no reference images found under {args.refs}")
    probes = _expand_images(args.probes, "--probes") if args.probes else refs
    axes: dict[str, list[str]] = {}
    for spec in args.axis or []:
        name, values = parse_axis(spec)
        axes[name] = values
    report = run_bench(
        refs,
        probes,
        cfg,
        shots=[int(v) for v in axes["shots"]] if "shots" in axes else None,
        resolutions=[int(v) for v in axes["resolution"]] if "resolution" in axes else None,
        preprocessing=axes.get("preprocessing"),
        kernel_names=axes.get("kernel"),
        warmup=args.warmup,
        iters=args.iters,
        category=args.category or "",
    )
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    return 0


def cmd_mask_test(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    category = args.category or ""
    if cfg.is_texture(category):
        print("skipped (texture)")
        return 0
    backbone = resolve_backbone(cfg.backbone)
    img = preprocess_image(load_image(args.image), cfg.preprocess_config(category))
    grid = backbone.extract(img, source_id=Path(args.image).stem)
    policy = MaskPolicy()
    mask = compute_mask(grid, policy)
    result = masking_test(mask, policy)
    verdict = "pass" if result.passed else "fail"
    print(
        f"{verdict}: center_fg={result.center_fg_fraction:.4f} "
        f"global_fg={result.global_fg_fraction:.4f}"
    )
    if args.out_mask:
        save_mask_png(mask, args.out_mask)
    return 0


# --- parser ---------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser, *, agg: bool = True) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--backbone", help="toy | file:<dir> | extern:<command>")
    p.add_argument("--resolution", type=int, help="smaller-edge target, multiple of 14")
    p.add_argument("--rotations", choices=("agnostic", "informed", "off"), dest="rotations",
                   help="reference rotation augmentation mode")
    p.add_argument("--masking", choices=("auto", "on", "off"), help="foreground masking mode")
    p.add_argument("--texture", action="store_const", const=True, default=None,
                   help="treat the category as a texture (disables masking)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: PATCHBANK_THREADS or all cores)")
    if agg:
        p.add_argument("--agg", help="mean-top[:fraction] | max-patch | max-map")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchbank",
        description="Training-free patch-level nearest-neighbor anomaly detection.",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-bank", help="build a reference memory bank (.amb)")
    p.add_argument("--refs", nargs="+", required=True, help="reference images or directories")
    p.add_argument("--out", required=True, help="output .amb path")
    p.add_argument("--category", help="category name for policy lookup and metadata")
    p.add_argument("--mask-references", action="store_const", const=True, default=None,
                   dest="mask_references", help="drop background patches from the bank")
    p.add_argument("--shared-pca", action="store_const", const=True, default=None,
                   dest="shared_pca", help="fit one masking direction on all references")
    p.add_argument("--coreset", type=int, help="greedy coreset size")
    p.add_argument("--coreset-seed", type=int, dest="coreset_seed")
    _add_config_flags(p, agg=False)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("score", help="score images against a bank")
    p.add_argument("--bank", required=True, help=".amb file from build-bank")
    p.add_argument("--inputs", nargs="+", required=True, help="images or directories")
    p.add_argument("--maps", help="directory for heatmap PNGs")
    p.add_argument("--raw-maps", action="store_true", help="also dump raw float maps")
    p.add_argument("--heat-normalizer", type=float, default=0.5,
                   help="score mapped to the hottest color (default 0.5)")
    p.add_argument("--csv", help="also write results to this CSV file")
    _add_config_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("batched", help="zero-shot mutual scoring of a batch")
    p.add_argument("--inputs", nargs="+", required=True, help="images or directories (>= 2)")
    p.add_argument("--alpha", type=float, help="tail fraction of the pooled bank")
    p.add_argument("--maps", help="directory for heatmap PNGs")
    p.add_argument("--heat-normalizer", type=float, default=0.5)
    p.add_argument("--csv", help="also write results to this CSV file")
    _add_config_flags(p)
    p.set_defaults(func=cmd_batched)

    p = sub.add_parser("eval", help="k-shot evaluation over a dataset tree")
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--layout", choices=("mvtec", "visa"), default="mvtec")
    p.add_argument("--shots", default="1", help="comma-separated k values, e.g. 1,2,4")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--categories", help="comma-separated subset of categories")
    p.add_argument("--pro-thresholds", type=int, default=200, dest="pro_thresholds")
    p.add_argument("--out-json", dest="out_json", help="write the full report as JSON")
    p.add_argument("--out-csv", dest="out_csv", help="write per-metric rows as CSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency benchmark across config axes")
    p.add_argument("--refs", nargs="+", required=True, help="reference images or directories")
    p.add_argument("--probes", nargs="+", help="probe images (default: refs)")
    p.add_argument("--axis", action="append",
                   help="axis sweep, e.g. shots=1,2,4 or kernel=ext,numpy (repeatable)")
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--category", help="category name for policy lookup")
    p.add_argument("--out", help="write the report as JSON")
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("mask-test", help="run the foreground masking test on one image")
    p.add_argument("--image", required=True)
    p.add_argument("--category", help="category name (textures are skipped)")
    p.add_argument("--out-mask", dest="out_mask", help="write the debug mask PNG here")
    _add_config_flags(p, agg=False)
    p.set_defaults(func=cmd_mask_test)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (PatchbankError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
