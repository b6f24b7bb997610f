"""Release acceptance gate: one test per ship criterion.

Each test prints a single [PASS]/[FAIL] line naming its criterion, so
``pytest -m acceptance -v -s`` doubles as the release checklist.  The
oracles here are deliberately naive reimplementations (explicit double
loops, full threshold enumeration, dense convolution) kept independent
of the library code they check.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from patchbank.batched import BatchedConfig, batched_run, mutual_patch_scores, tail_count
from patchbank.bench import AXIS_NAMES, run_bench
from patchbank.evaluation import (
    auroc,
    average_precision,
    f1_max,
    load_dataset,
    pro,
    run_fewshot_eval,
)
from patchbank.features import (
    PatchFeatureGrid,
    PreprocessConfig,
    ToyBackbone,
    load_image,
    preprocess_image,
)
from patchbank.masking import fit_pca_direction
from patchbank.memory import MemoryBank, nn_distance
from patchbank.pipeline import RunConfig, build_reference_bank, score_image
from patchbank.scoring import AnomalyMap, PatchDistances, ScoreConfig, aggregate, make_map

pytestmark = pytest.mark.acceptance


def _gate(name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}"
    if detail:
        line += f"  ({detail})"
    print(line)
    assert ok, line


# --- ranking-metric oracles ---------------------------------------------------


def _pair_count_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (pos.size * neg.size)


def _enumerate_f1_ap(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    n_pos = int(labels.sum())
    best_f1 = 0.0
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        recall = tp / n_pos
        precision = tp / (tp + fp)
        if tp:
            best_f1 = max(best_f1, 2.0 * precision * recall / (precision + recall))
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return best_f1, ap


def test_auroc_matches_pair_counting_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        if rng.random() < 0.5:
            scores = rng.integers(0, 6, size=n) / 5.0  # coarse grid forces ties
        else:
            scores = rng.normal(size=n)
        worst = max(worst, abs(auroc(scores, labels) - _pair_count_auroc(scores, labels)))
    elapsed = time.perf_counter() - t0
    _gate(
        "auroc matches pair-counting oracle, 100 instances n<=200, tol 1e-12, <5s",
        worst <= 1e-12 and elapsed < 5.0,
        f"worst={worst:.2e} elapsed={elapsed:.2f}s",
    )


def test_f1max_and_ap_match_full_enumeration():
    rng = np.random.default_rng(202)
    worst = 0.0
    cases = 0
    # every binary label pattern with both classes, n <= 5, over a tied score vector
    base = np.array([0.5, 0.25, 0.5, 0.75, 0.25])
    for n in range(2, 6):
        scores = base[:n]
        for bits in range(1, 2**n - 1):
            labels = np.array([(bits >> i) & 1 for i in range(n)])
            ef1, eap = _enumerate_f1_ap(scores, labels)
            worst = max(worst, abs(f1_max(scores, labels) - ef1))
            worst = max(worst, abs(average_precision(scores, labels) - eap))
            cases += 1
    # random instances at every size up to 12
    for n in range(2, 13):
        for _ in range(40):
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[rng.integers(n)] = 1 - labels[0]
            scores = rng.integers(0, 5, size=n) / 4.0
            ef1, eap = _enumerate_f1_ap(scores, labels)
            worst = max(worst, abs(f1_max(scores, labels) - ef1))
            worst = max(worst, abs(average_precision(scores, labels) - eap))
            cases += 1
    _gate(
        "f1_max and average_precision match full enumeration on instances n<=12",
        worst <= 1e-12,
        f"{cases} instances, worst={worst:.2e}",
    )


# --- nearest-neighbor oracles -------------------------------------------------


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.normal(size=(n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def test_nn_and_mutual_scores_match_double_loop_oracles():
    rng = np.random.default_rng(303)
    bank = MemoryBank(_unit_rows(rng, 500, 14), {})
    worst = 0.0
    for _ in range(64):
        q = _unit_rows(rng, 1, 14)[0]
        best = max(float(np.dot(q, row)) for row in bank.vectors)
        worst = max(worst, abs(nn_distance(q, bank) - max(0.0, 1.0 - best)))

    # batch of three grids; for j=0 the pool is 196 + 240 = 436 rows
    grids = [
        PatchFeatureGrid(rng.normal(size=(8, 8, 14)).astype(np.float32)),
        PatchFeatureGrid(rng.normal(size=(14, 14, 14)).astype(np.float32)),
        PatchFeatureGrid(rng.normal(size=(15, 16, 14)).astype(np.float32)),
    ]
    cfg = BatchedConfig(alpha=0.01)
    normalized = []
    for g in grids:
        flat = g.flat().astype(np.float64)
        normalized.append(flat / np.linalg.norm(flat, axis=1, keepdims=True))
    worst_mutual = 0.0
    for j in range(3):
        pool = np.concatenate([normalized[i] for i in range(3) if i != j], axis=0)
        k = tail_count(cfg.alpha, pool.shape[0])
        got = mutual_patch_scores(grids, j, cfg).values.reshape(-1)
        for qi, q in enumerate(normalized[j]):
            dists = sorted(1.0 - float(np.dot(q, row)) for row in pool)
            expect = max(0.0, sum(dists[:k]) / k)
            worst_mutual = max(worst_mutual, abs(got[qi] - expect))
    _gate(
        "nn_distance and mutual_patch_scores match exhaustive double-loop oracles, tol 1e-12",
        worst <= 1e-12 and worst_mutual <= 1e-12,
        f"nn worst={worst:.2e} mutual worst={worst_mutual:.2e} (500-row bank, 64 queries)",
    )


# --- anomaly-map oracle ---------------------------------------------------------


def _naive_gauss(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _naive_map(values: np.ndarray, out_h: int, out_w: int, cfg: ScoreConfig) -> np.ndarray:
    gh, gw = values.shape
    up = np.empty((out_h, out_w))
    for r in range(out_h):
        pr = min(max((r + 0.5) * gh / out_h - 0.5, 0.0), gh - 1.0)
        r0 = min(int(math.floor(pr)), gh - 1)
        r1 = min(r0 + 1, gh - 1)
        fr = pr - r0
        for c in range(out_w):
            pc = min(max((c + 0.5) * gw / out_w - 0.5, 0.0), gw - 1.0)
            c0 = min(int(math.floor(pc)), gw - 1)
            c1 = min(c0 + 1, gw - 1)
            fc = pc - c0
            top = values[r0, c0] * (1.0 - fc) + values[r0, c1] * fc
            bot = values[r1, c0] * (1.0 - fc) + values[r1, c1] * fc
            up[r, c] = top * (1.0 - fr) + bot * fr
    rh = min(cfg.kernel_radius, out_h - 1)
    rw = min(cfg.kernel_radius, out_w - 1)
    kernel = np.outer(_naive_gauss(cfg.sigma, rh), _naive_gauss(cfg.sigma, rw))
    padded = np.pad(up, ((rh, rh), (rw, rw)), mode="reflect")
    out = np.empty_like(up)
    for r in range(out_h):
        for c in range(out_w):
            out[r, c] = float(np.sum(padded[r : r + 2 * rh + 1, c : c + 2 * rw + 1] * kernel))
    return np.maximum(out, 0.0)


def test_map_matches_naive_upsample_convolve_oracle():
    rng = np.random.default_rng(404)
    worst = 0.0
    cases = 0
    for sigma in (1.0, 2.5, 4.0):
        for _ in range(4):
            gh = int(rng.integers(1, 9))
            gw = int(rng.integers(1, 9))
            values = rng.random((gh, gw)) * 2.0
            excluded = rng.random((gh, gw)) < 0.2
            values[excluded] = 0.0
            d = PatchDistances(values=values, excluded=excluded)
            cfg = ScoreConfig(sigma=sigma)
            got = make_map(d, gh * 14, gw * 14, cfg).values
            expect = _naive_map(values, gh * 14, gw * 14, cfg)
            worst = max(worst, float(np.abs(got - expect).max()))
            cases += 1
    _gate(
        "make_map matches naive dense bilinear+convolution oracle, tol 1e-6",
        worst <= 1e-6,
        f"{cases} grids up to 8x8 -> 112x112, worst={worst:.2e}",
    )


# --- PCA direction oracle -------------------------------------------------------


def test_pca_direction_matches_exact_eigendecomposition():
    rng = np.random.default_rng(505)
    worst_cos = 1.0
    for _ in range(50):
        dim = int(rng.integers(2, 9))
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        scales = np.array([10.0] + list(rng.uniform(0.2, 2.0, size=dim - 1)))
        data = (rng.normal(size=(100, dim)) * scales) @ q.T + rng.normal(size=dim)
        grid = PatchFeatureGrid(data.reshape(10, 10, dim).astype(np.float32))
        direction = fit_pca_direction([grid])

        pooled = grid.features.reshape(-1, dim).astype(np.float64)
        centered = pooled - pooled.mean(axis=0)
        _, vecs = np.linalg.eigh(centered.T @ centered)
        worst_cos = min(worst_cos, abs(float(np.dot(direction, vecs[:, -1]))))
    _gate(
        "fit_pca_direction aligns with exact covariance eigendecomposition, |cos| >= 0.999",
        worst_cos >= 0.999,
        f"50 trials dim<=8, worst |cos|={worst_cos:.6f}",
    )


# --- per-region overlap oracle --------------------------------------------------


def _regions_8conn(mask: np.ndarray) -> list[np.ndarray]:
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    regions = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            stack = [(r, c)]
            seen[r, c] = True
            member = np.zeros_like(mask, dtype=bool)
            while stack:
                y, x = stack.pop()
                member[y, x] = True
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            regions.append(member)
    return regions


def _naive_pro(maps: list[np.ndarray], gts: list[np.ndarray], fpr_limit: float) -> float:
    regions = [(i, reg) for i, gt in enumerate(gts) for reg in _regions_8conn(gt)]
    neg_total = sum(int((~gt).sum()) for gt in gts)
    values = sorted({float(v) for m in maps for v in m.reshape(-1)}, reverse=True)
    pts = [(0.0, 0.0)]
    for t in values:
        recalls = [float(maps[i][reg].__ge__(t).mean()) for i, reg in regions]
        fp = sum(int(((m >= t) & ~gt).sum()) for m, gt in zip(maps, gts))
        pts.append((fp / neg_total, float(np.mean(recalls))))
    area = 0.0
    for (f0, p0), (f1, p1) in zip(pts, pts[1:]):
        if f1 <= f0:
            continue
        if f0 >= fpr_limit:
            break
        if f1 > fpr_limit:
            p1 = p0 + (p1 - p0) * (fpr_limit - f0) / (f1 - f0)
            f1 = fpr_limit
        area += (f1 - f0) * (p0 + p1) / 2.0
    return area / fpr_limit


def test_pro_matches_exhaustive_threshold_oracle():
    # frozen hand-computed fixture: two-cell region, area 8/35 over limit 0.3
    gt = np.zeros((4, 4), dtype=bool)
    gt[0, 0] = gt[0, 1] = True
    amap = np.zeros((4, 4))
    amap[0, 0] = 0.9
    amap[0, 1] = 0.3
    amap[1, 3] = 0.8
    amap[2, 2] = 0.5
    amap[3, 0] = 0.2
    frozen = abs(pro([AnomalyMap(amap)], [gt], exact=True) - 16.0 / 21.0)

    rng = np.random.default_rng(606)
    worst = frozen
    for _ in range(20):
        h = int(rng.integers(2, 9))
        w = int(rng.integers(2, 9))
        maps, gts = [], []
        for _ in range(2):
            m = rng.integers(0, 7, size=(h, w)) / 6.0
            g = np.zeros((h, w), dtype=bool)
            for _ in range(int(rng.integers(1, 3))):
                r0 = int(rng.integers(0, h))
                c0 = int(rng.integers(0, w))
                g[r0 : r0 + int(rng.integers(1, 3)), c0 : c0 + int(rng.integers(1, 3))] = True
            g[h - 1, w - 1] = False  # keep at least one negative pixel
            maps.append(m)
            gts.append(g)
        if not any(g.any() for g in gts):
            gts[0][0, 0] = True
        for limit in (0.1, 0.3, 1.0):
            got = pro([AnomalyMap(m) for m in maps], gts, fpr_limit=limit, exact=True)
            worst = max(worst, abs(got - _naive_pro(maps, gts, limit)))
    _gate(
        "pro matches exhaustive per-threshold oracle on grids <=8x8, tol 1e-9",
        worst <= 1e-9,
        f"frozen fixture diff={frozen:.2e}, sweep worst={worst:.2e}",
    )


# --- invariant-suite budget -----------------------------------------------------


def test_invariant_suite_runs_single_threaded_under_budget():
    env = os.environ.copy()
    env["PATCHBANK_THREADS"] = "1"
    tests_dir = Path(__file__).resolve().parent
    t0 = time.perf_counter()
    proc = subprocess.run(
        [
            sys.executable,
            "-m",
            "pytest",
            "-m",
            "invariants",
            "-q",
            "-p",
            "no:cacheprovider",
            str(tests_dir),
        ],
        cwd=str(tests_dir.parent),
        env=env,
        capture_output=True,
        text=True,
    )
    elapsed = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[:200]
    _gate(
        "invariant suite passes single-threaded in under 60s",
        proc.returncode == 0 and elapsed < 60.0,
        f"elapsed={elapsed:.1f}s, {tail}",
    )


# --- synthetic end-to-end -------------------------------------------------------


def test_synthetic_end_to_end_one_shot(benchmark_root):
    index = load_dataset(benchmark_root)
    assert len(index.categories) == 2
    for cat in index.categories:
        assert sum(1 for s in cat.test if s.label == 0) >= 20
        assert sum(1 for s in cat.test if s.label == 1) >= 20

    t0 = time.perf_counter()
    report = run_fewshot_eval(index, k=1, seeds=3, cfg=RunConfig(), pro_thresholds=100)
    elapsed = time.perf_counter() - t0

    detail_parts = []
    ok = elapsed < 120.0
    for row in report.rows:
        image = row.metrics["image_auroc"]["mean"]
        pixel = row.metrics["pixel_auroc"]["mean"]
        detail_parts.append(f"{row.category}: image={image:.4f} pixel={pixel:.4f}")
        ok = ok and image >= 0.95 and pixel >= 0.90

    again = run_fewshot_eval(
        index, k=1, seeds=3, cfg=RunConfig(), categories=["plates"], pro_thresholds=100
    )
    first = next(r for r in report.rows if r.category == "plates")
    deterministic = all(
        first.metrics[name]["per_seed"] == again.rows[0].metrics[name]["per_seed"]
        for name in first.metrics
    )
    ok = ok and deterministic
    _gate(
        "synthetic 2-category 1-shot eval: image AUROC >= 0.95, pixel AUROC >= 0.90, "
        "deterministic, < 2min",
        ok,
        "; ".join(detail_parts) + f"; deterministic={deterministic}; elapsed={elapsed:.1f}s",
    )


def test_aggregation_ablation_from_single_flag(benchmark_root):
    # the three statistics must disagree on a crafted input, proving the flag selects them
    values = np.zeros((4, 4))
    values[0, 0] = 1.0
    values[3, 3] = 0.5
    d = PatchDistances(values=values, excluded=np.zeros((4, 4), dtype=bool))
    outputs = {
        agg: aggregate(d, ScoreConfig(aggregation=agg, fraction=0.5))
        for agg in ("mean_top_fraction", "max_patch", "max_map")
    }
    distinct = len(set(outputs.values())) == 3

    index = load_dataset(benchmark_root)
    base = RunConfig(resolution=224, rotation_mode="off", masking_mode="off")
    results = {}
    for agg in ("mean_top_fraction", "max_patch", "max_map"):
        cfg = dataclasses.replace(base, aggregation=agg)
        report = run_fewshot_eval(index, k=1, seeds=3, cfg=cfg, pro_thresholds=50)
        results[agg] = report.mean_row(1)["image_auroc"]
    ok = distinct and results["mean_top_fraction"] >= results["max_map"] - 0.02
    _gate(
        "aggregation ablation: mean_top_fraction within 0.02 AUROC of max_map, "
        "all three variants from one flag",
        ok,
        ", ".join(f"{k}={v:.4f}" for k, v in results.items()),
    )


def test_batched_mutual_scoring_on_sparse_batch(benchmark_root):
    cat = load_dataset(benchmark_root).category("plates")
    goods = [s.path for s in cat.test if s.label == 0][:20]
    bads = [s.path for s in cat.test if s.label == 1][:3]
    paths = goods + cat.train[:7] + bads
    labels = [0] * 27 + [1] * 3

    backbone = ToyBackbone()
    pcfg = PreprocessConfig(resolution=448)
    grids = [
        backbone.extract(preprocess_image(load_image(p), pcfg), source_id=p.stem)
        for p in paths
    ]
    cfg = BatchedConfig()
    scores, _ = batched_run(grids, cfg, threads=1, with_maps=False)
    score_auroc = auroc(scores, labels)

    rng = np.random.default_rng(707)
    perm = rng.permutation(len(grids))
    permuted_scores, _ = batched_run([grids[i] for i in perm], cfg, threads=1, with_maps=False)
    equivariant = all(permuted_scores[pos] == scores[src] for pos, src in enumerate(perm))
    _gate(
        "batched mutual scoring: 10% anomalous batch AUROC >= 0.90, "
        "permutation equivariance exact",
        score_auroc >= 0.90 and equivariant,
        f"auroc={score_auroc:.4f} equivariant={equivariant} (30 images, 3 anomalous)",
    )


def test_throughput_meets_floor(benchmark_root):
    cat = load_dataset(benchmark_root).category("plates")
    cfg = RunConfig(resolution=448, rotation_mode="off", masking_mode="off", threads=1)
    backbone = ToyBackbone()
    bundle = build_reference_bank(cat.train, cfg, category="plates", backbone=backbone)
    assert bundle.bank.count == 16384

    goods = [s.path for s in cat.test if s.label == 0][:20]
    for p in goods[:2]:  # warmup
        score_image(p, bundle.bank, cfg, backbone=backbone, with_map=False)
    best_rate = 0.0
    for _ in range(2):
        t0 = time.perf_counter()
        for p in goods:
            score_image(p, bundle.bank, cfg, backbone=backbone, with_map=False)
        best_rate = max(best_rate, len(goods) / (time.perf_counter() - t0))
    _gate(
        "scoring throughput >= 20 img/s single-threaded at 448 with a 16384-row bank",
        best_rate >= 20.0,
        f"{best_rate:.1f} img/s over {len(goods)} images",
    )


def test_bench_reports_required_axes(benchmark_root):
    cat = load_dataset(benchmark_root).category("plates")
    probes = [s.path for s in cat.test if s.label == 0][:2]
    cfg = RunConfig(resolution=112, rotation_mode="off", masking_mode="off")
    report = run_bench(
        cat.train[:2],
        probes,
        cfg,
        shots=[1, 2],
        resolutions=[112],
        preprocessing=["plain"],
        warmup=0,
        iters=2,
    )
    data = json.loads(report.to_json())
    required = {"shots", "resolution", "preprocessing"}
    rows_ok = all(required <= set(row) for row in data["rows"])
    shots_seen = {row["shots"] for row in data["rows"]}
    ok = required <= set(AXIS_NAMES) and rows_ok and shots_seen == {1, 2}
    _gate(
        "benchmark report carries shots/resolution/preprocessing axes",
        ok,
        f"{len(data['rows'])} rows, shots axis={sorted(shots_seen)}",
    )


# --- known-good operating points for pretrained features (opt-in) ----------------

_MVTEC_READY = bool(os.environ.get("PATCHBANK_MVTEC_ROOT")) and bool(
    os.environ.get("PATCHBANK_MVTEC_FEATURES")
)
_VISA_READY = bool(os.environ.get("PATCHBANK_VISA_ROOT")) and bool(
    os.environ.get("PATCHBANK_VISA_FEATURES")
)


@pytest.mark.skipif(
    not _MVTEC_READY,
    reason="set PATCHBANK_MVTEC_ROOT and PATCHBANK_MVTEC_FEATURES to run",
)
def test_pretrained_feature_track_mvtec():
    cfg = RunConfig(
        backbone=f"file:{os.environ['PATCHBANK_MVTEC_FEATURES']}",
        resolution=672,
    )
    index = load_dataset(os.environ["PATCHBANK_MVTEC_ROOT"], layout="mvtec")
    means = run_fewshot_eval(index, k=1, seeds=3, cfg=cfg).mean_row(1)
    image = means["image_auroc"] * 100.0
    region = means["pro"] * 100.0
    _gate(
        "MVTec k=1 @672 with exported features: image AUROC 96.6+-1.5, PRO 92.7+-1.5",
        abs(image - 96.6) <= 1.5 and abs(region - 92.7) <= 1.5,
        f"image={image:.2f} pro={region:.2f}",
    )


@pytest.mark.skipif(
    not _VISA_READY,
    reason="set PATCHBANK_VISA_ROOT and PATCHBANK_VISA_FEATURES to run",
)
def test_pretrained_feature_track_visa():
    cfg = RunConfig(
        backbone=f"file:{os.environ['PATCHBANK_VISA_FEATURES']}",
        resolution=672,
    )
    index = load_dataset(os.environ["PATCHBANK_VISA_ROOT"], layout="visa")
    means = run_fewshot_eval(index, k=1, seeds=3, cfg=cfg).mean_row(1)
    image = means["image_auroc"] * 100.0
    _gate(
        "VisA k=1 @672 with exported features: image AUROC 87.4+-2.0",
        abs(image - 87.4) <= 2.0,
        f"image={image:.2f}",
    )
