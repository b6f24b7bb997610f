"""Wall-clock benchmark harness for bank building and per-image scoring.

Measures the full score path (decode, preprocess, extract, scan, aggregate)
with warmup iterations, and sweeps the axes that matter for deployment:
shots, resolution, preprocessing preset, and scan kernel.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path

from . import kernels
from .errors import InvalidInputError
from .pipeline import RunConfig, build_reference_bank, score_image

LOGGER = logging.getLogger(__name__)

# Preset name -> (rotation_mode, masking_mode)
PREPROCESSING_PRESETS = {
    "plain": ("off", "off"),
    "agnostic": ("agnostic", "auto"),
    "informed": ("informed", "auto"),
}

AXIS_NAMES = ("shots", "resolution", "preprocessing", "kernel")


@dataclass(frozen=True)
class BenchRow:
    shots: int
    resolution: int
    preprocessing: str
    kernel: str
    bank_rows: int
    bank_build_mean: float
    bank_build_std: float
    per_sample_mean: float
    per_sample_std: float

    @property
    def images_per_second(self) -> float:
        return 1.0 / self.per_sample_mean if self.per_sample_mean > 0 else float("inf")


@dataclass
class BenchReport:
    rows: list[BenchRow]
    warmup: int
    iters: int
    config: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "warmup": self.warmup,
                "iters": self.iters,
                "rows": [
                    {
                        "shots": r.shots,
                        "resolution": r.resolution,
                        "preprocessing": r.preprocessing,
                        "kernel": r.kernel,
                        "bank_rows": r.bank_rows,
                        "bank_build_mean_s": r.bank_build_mean,
                        "bank_build_std_s": r.bank_build_std,
                        "per_sample_mean_s": r.per_sample_mean,
                        "per_sample_std_s": r.per_sample_std,
                        "images_per_second": r.images_per_second,
                    }
                    for r in self.rows
                ],
            },
            indent=2,
            sort_keys=True,
        )

    def table(self) -> str:
        header = (
            f"{'shots':>5} {'res':>5} {'preproc':>9} {'kernel':>6} {'|M|':>7} "
            f"{'build (s)':>12} {'per-img (ms)':>14} {'img/s':>8}"
        )
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.shots:>5} {r.resolution:>5} {r.preprocessing:>9} {r.kernel:>6} "
                f"{r.bank_rows:>7} "
                f"{r.bank_build_mean:>7.3f}+-{r.bank_build_std:.3f} "
                f"{r.per_sample_mean * 1e3:>8.2f}+-{r.per_sample_std * 1e3:.2f} "
                f"{r.images_per_second:>8.1f}"
            )
        return "\n".join(lines)


def parse_axis(spec: str) -> tuple[str, list[str]]:
    """Parse an axis spec like "shots=1,2,4" into (name, values)."""
    if "=" not in spec:
        raise InvalidInputError(f"axis spec must look like name=v1,v2 got {spec!r}")
    name, _, rest = spec.partition("=")
    name = name.strip()
    if name not in AXIS_NAMES:
        raise InvalidInputError(f"unknown axis {name!r}, expected one of {AXIS_NAMES}")
    values = [v.strip() for v in rest.split(",") if v.strip()]
    if not values:
        raise InvalidInputError(f"axis {name!r} has no values")
    return name, values


def _apply_preset(cfg: RunConfig, preset: str) -> RunConfig:
    if preset not in PREPROCESSING_PRESETS:
        raise InvalidInputError(
            f"preprocessing preset must be one of {sorted(PREPROCESSING_PRESETS)}, got {preset!r}"
        )
    rotation_mode, masking_mode = PREPROCESSING_PRESETS[preset]
    return replace(cfg, rotation_mode=rotation_mode, masking_mode=masking_mode)


def run_bench(
    ref_paths: list[Path],
    probe_paths: list[Path],
    cfg: RunConfig,
    shots: list[int] | None = None,
    resolutions: list[int] | None = None,
    preprocessing: list[str] | None = None,
    kernel_names: list[str] | None = None,
    warmup: int = 10,
    iters: int = 100,
    category: str = "",
    build_repeats: int = 3,
) -> BenchReport:
    """Time bank building and scoring across the requested axis values.

    Args:
        ref_paths: nominal reference images, sorted; the first ``k`` are used
            per shots value.
        probe_paths: images scored during measurement, cycled round-robin.
        cfg: base pipeline configuration; axis values override its fields.
        warmup: unmeasured iterations before timing.
        iters: measured iterations.

    Returns:
        BenchReport with one row per axis combination.
    """
    if not ref_paths:
        raise InvalidInputError("no reference images")
    if not probe_paths:
        raise InvalidInputError("no probe images")
    if iters < 2:
        raise InvalidInputError(f"iters must be >= 2 for a std estimate, got {iters}")
    shots = shots or [1]
    resolutions = resolutions or [cfg.resolution]
    preprocessing = preprocessing or ["plain"]
    kernel_names = kernel_names or [kernels.active_kernel()]

    for k in shots:
        if k < 1 or k > len(ref_paths):
            raise InvalidInputError(f"shots={k} but only {len(ref_paths)} reference images")
    previous = kernels.active_kernel()
    rows: list[BenchRow] = []
    try:
        for kernel_name in kernel_names:
            kernels.use_kernel(kernel_name)
            for preset in preprocessing:
                for resolution in resolutions:
                    run_cfg = _apply_preset(replace(cfg, resolution=int(resolution)), preset)
                    for k in shots:
                        rows.append(
                            _bench_one(
                                ref_paths[:k], probe_paths, run_cfg, kernel_name, preset,
                                warmup, iters, category, build_repeats,
                            )
                        )
    finally:
        kernels.use_kernel(previous)
    return BenchReport(rows=rows, warmup=warmup, iters=iters, config=cfg.as_dict())


def _bench_one(
    refs: list[Path],
    probes: list[Path],
    cfg: RunConfig,
    kernel_name: str,
    preset: str,
    warmup: int,
    iters: int,
    category: str,
    build_repeats: int,
) -> BenchRow:
    build_times = []
    bundle = None
    for _ in range(max(1, build_repeats)):
        t0 = time.perf_counter()
        bundle = build_reference_bank(refs, cfg, category=category)
        build_times.append(time.perf_counter() - t0)
    assert bundle is not None

    def score_one(i: int) -> None:
        score_image(probes[i % len(probes)], bundle.bank, cfg, with_map=False)

    for i in range(warmup):
        score_one(i)
    sample_times = []
    for i in range(iters):
        t0 = time.perf_counter()
        score_one(i)
        sample_times.append(time.perf_counter() - t0)

    row = BenchRow(
        shots=len(refs),
        resolution=cfg.resolution,
        preprocessing=preset,
        kernel=kernel_name,
        bank_rows=bundle.bank.count,
        bank_build_mean=statistics.fmean(build_times),
        bank_build_std=statistics.pstdev(build_times) if len(build_times) > 1 else 0.0,
        per_sample_mean=statistics.fmean(sample_times),
        per_sample_std=statistics.pstdev(sample_times),
    )
    LOGGER.info(
        "bench shots=%d res=%d preproc=%s kernel=%s: %.2f ms/img (%.1f img/s)",
        row.shots, row.resolution, preset, kernel_name,
        row.per_sample_mean * 1e3, row.images_per_second,
    )
    return row
