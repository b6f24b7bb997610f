"""Metrics (AUROC, F1-max, AP, pixel metrics, PRO), dataset index, k-shot runs."""

from __future__ import annotations

import csv
import io
import itertools
import json

import numpy as np
import pytest

from patchbank.errors import InvalidInputError, UndefinedMetricError
from patchbank.evaluation import (
    METRIC_NAMES,
    auroc,
    average_precision,
    f1_max,
    load_dataset,
    pixel_metrics,
    pro,
    run_fewshot_eval,
)
from patchbank.pipeline import RunConfig
from patchbank.scoring import AnomalyMap

# Frozen scalar oracles, worked by hand:
#   scores [0.9, 0.6, 0.4, 0.1], labels [1, 0, 1, 0]:
#     pairs (pos, neg): (0.9,0.6)+1 (0.9,0.1)+1 (0.4,0.6)+0 (0.4,0.1)+1 -> 3/4
AUROC_ORACLE = 0.75
#   scores [0.9, 0.8, 0.3], labels [1, 0, 1]:
#     t=0.9: P=1, R=1/2, f1=2/3; t=0.8: P=1/2, R=1/2, f1=1/2; t=0.3: P=2/3, R=1, f1=4/5
F1MAX_ORACLE = 0.8
#     AP steps: R 0->1/2 at P=1, R 1/2->1 at P=2/3 -> 1/2 + 1/3 = 5/6
AP_ORACLE = 5.0 / 6.0
# 4x4 PRO fixture: one 2-cell region valued {0.9, 0.3}; negatives {0.8, 0.5,
# 0.2} plus eleven zeros. Exact threshold sweep, fpr_limit 0.3 -> 16/21.
PRO_ORACLE = 16.0 / 21.0


def test_auroc_frozen():
    assert auroc([0.9, 0.6, 0.4, 0.1], [1, 0, 1, 0]) == pytest.approx(AUROC_ORACLE, abs=1e-15)


def test_f1max_and_ap_frozen():
    scores, labels = [0.9, 0.8, 0.3], [1, 0, 1]
    assert f1_max(scores, labels) == pytest.approx(F1MAX_ORACLE, abs=1e-15)
    assert average_precision(scores, labels) == pytest.approx(AP_ORACLE, abs=1e-15)


def _pair_count_auroc(scores, labels):
    """Independent reference: count concordant pos/neg pairs, ties half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def _enumerate_f1_ap(scores, labels):
    """Independent reference: explicit sweep over every distinct threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = labels.sum()
    points = []  # (recall, precision) per threshold, descending thresholds
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int((pred & (labels == 1)).sum())
        precision = tp / int(pred.sum())
        recall = tp / n_pos
        points.append((recall, precision))
    best_f1 = max(
        (2 * r * p / (r + p)) if (r + p) > 0 else 0.0 for r, p in points
    )
    ap = 0.0
    prev_r = 0.0
    for r, p in points:
        ap += (r - prev_r) * p
        prev_r = r
    return best_f1, ap


@pytest.mark.invariants
def test_auroc_matches_pair_counting(rng):
    for _ in range(100):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0], labels[-1] = 0, 1
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        assert auroc(scores, labels) == pytest.approx(
            _pair_count_auroc(scores, labels), abs=1e-12
        )


@pytest.mark.invariants
def test_f1_ap_match_enumeration(rng):
    for _ in range(100):
        n = int(rng.integers(2, 13))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[0] = 1
        scores = np.round(rng.random(n), 1)
        want_f1, want_ap = _enumerate_f1_ap(scores, labels)
        assert f1_max(scores, labels) == pytest.approx(want_f1, abs=1e-12)
        assert average_precision(scores, labels) == pytest.approx(want_ap, abs=1e-12)


@pytest.mark.invariants
def test_auroc_negation_antisymmetry(rng):
    """Tie-free scores: flipping sign flips the area around 1/2."""
    for _ in range(100):
        n = int(rng.integers(2, 80))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0], labels[-1] = 0, 1
        scores = rng.permutation(n).astype(float)  # distinct by construction
        assert auroc(-scores, labels) == pytest.approx(
            1.0 - auroc(scores, labels), abs=1e-12
        )


@pytest.mark.invariants
def test_metrics_invariant_under_monotone_transforms(rng):
    for _ in range(100):
        n = int(rng.integers(3, 40))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0], labels[-1] = 0, 1
        scores = rng.random(n) * 4 - 2
        warped = np.exp(scores) if rng.integers(2) else scores**3 + 5 * scores
        assert auroc(warped, labels) == pytest.approx(auroc(scores, labels), abs=1e-12)
        assert f1_max(warped, labels) == pytest.approx(f1_max(scores, labels), abs=1e-12)
        assert average_precision(warped, labels) == pytest.approx(
            average_precision(scores, labels), abs=1e-12
        )


def test_metric_input_validation():
    with pytest.raises(UndefinedMetricError):
        auroc([0.5, 0.6], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auroc([], [])
    with pytest.raises(UndefinedMetricError):
        f1_max([0.5], [0])
    with pytest.raises(InvalidInputError):
        auroc([0.5, 0.2], [1, 2])
    with pytest.raises(InvalidInputError):
        auroc([np.nan, 0.2], [1, 0])
    with pytest.raises(InvalidInputError):
        auroc([0.5], [1, 0])


# --- pixel metrics and PRO ------------------------------------------------------


def _pro_fixture():
    values = np.zeros((4, 4))
    values[0, 0] = 0.9
    values[0, 1] = 0.3
    values[1, 3] = 0.8
    values[2, 2] = 0.5
    values[3, 0] = 0.2
    gt = np.zeros((4, 4), dtype=bool)
    gt[0, 0] = gt[0, 1] = True
    return [AnomalyMap(values)], [gt]


def test_pro_frozen_fixture():
    maps, gts = _pro_fixture()
    assert pro(maps, gts, fpr_limit=0.3, exact=True) == pytest.approx(PRO_ORACLE, abs=1e-12)


def _regions_8conn(gt):
    """Own flood fill, 8-connectivity."""
    seen = np.zeros_like(gt, dtype=bool)
    regions = []
    h, w = gt.shape
    for sy in range(h):
        for sx in range(w):
            if not gt[sy, sx] or seen[sy, sx]:
                continue
            stack, cells = [(sy, sx)], []
            seen[sy, sx] = True
            while stack:
                y, x = stack.pop()
                cells.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and gt[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            regions.append(cells)
    return regions


def _naive_pro(maps, gts, fpr_limit):
    """Independent reference: explicit per-threshold sweep plus trapezoids."""
    regions = []
    for m, g in zip(maps, gts):
        regions.extend([(m.values, cells) for cells in _regions_8conn(g)])
    neg = np.concatenate([m.values[~g] for m, g in zip(maps, gts)])
    thresholds = sorted(
        set(np.concatenate([m.values.reshape(-1) for m in maps]).tolist()), reverse=True
    )
    xs, ys = [0.0], [0.0]
    for t in thresholds:
        recalls = []
        for values, cells in regions:
            hit = sum(1 for (y, x) in cells if values[y, x] >= t)
            recalls.append(hit / len(cells))
        xs.append(float((neg >= t).mean()))
        ys.append(float(np.mean(recalls)))
    area = 0.0
    for i in range(1, len(xs)):
        x0, x1, y0, y1 = xs[i - 1], xs[i], ys[i - 1], ys[i]
        if x1 <= x0 or x0 >= fpr_limit:
            continue
        if x1 > fpr_limit:
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
            x1 = fpr_limit
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return area / fpr_limit


def test_pro_matches_naive_sweep(rng):
    for _ in range(25):
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        gt = rng.random((h, w)) > 0.7
        if not gt.any():
            gt[0, 0] = True
        if gt.all():
            gt[-1, -1] = False
        values = np.round(rng.random((h, w)), 2)
        maps, gts = [AnomalyMap(values)], [gt]
        limit = float(rng.choice((0.1, 0.3, 1.0)))
        got = pro(maps, gts, fpr_limit=limit, exact=True)
        assert got == pytest.approx(_naive_pro(maps, gts, limit), abs=1e-9)


@pytest.mark.invariants
def test_pro_range_and_fpr_limit_monotone(rng):
    for _ in range(100):
        h, w = int(rng.integers(3, 8)), int(rng.integers(3, 8))
        gt = rng.random((h, w)) > 0.6
        if not gt.any():
            gt[1, 1] = True
        if gt.all():
            gt[0, 0] = False
        maps = [AnomalyMap(rng.random((h, w)))]
        limits = sorted(rng.uniform(0.05, 1.0, size=3))
        vals = [pro(maps, [gt], fpr_limit=l, exact=True) for l in limits]
        assert all(0.0 <= v <= 1.0 + 1e-12 for v in vals)
        assert vals[0] <= vals[1] + 1e-12 <= vals[2] + 2e-12


def test_pro_monotone_transform_invariance(rng):
    maps, gts = _pro_fixture()
    warped = [AnomalyMap(np.exp(maps[0].values))]
    assert pro(warped, gts, exact=True) == pytest.approx(
        pro(maps, gts, exact=True), abs=1e-12
    )


def test_pro_thresholded_close_to_exact(rng):
    h, w = 16, 16
    gt = np.zeros((h, w), dtype=bool)
    gt[4:8, 4:9] = True
    values = rng.random((h, w)) * 0.2
    values[4:8, 4:9] += 0.6
    maps = [AnomalyMap(values)]
    approx = pro(maps, [gt], thresholds=2000)
    exact = pro(maps, [gt], exact=True)
    assert approx == pytest.approx(exact, abs=0.01)


def test_pro_validation():
    maps, gts = _pro_fixture()
    with pytest.raises(UndefinedMetricError):
        pro(maps, [np.zeros((4, 4), dtype=bool)], exact=True)
    with pytest.raises(UndefinedMetricError):
        pro(maps, [np.ones((4, 4), dtype=bool)], exact=True)
    with pytest.raises(InvalidInputError):
        pro(maps, gts, fpr_limit=0.0)
    with pytest.raises(InvalidInputError):
        pro(maps, gts, thresholds=1)
    with pytest.raises(InvalidInputError):
        pro(maps, [np.zeros((3, 3), dtype=bool)])


def test_pixel_metrics_pools_across_images(rng):
    m1 = rng.random((6, 6))
    m2 = rng.random((6, 6))
    g1 = np.zeros((6, 6), dtype=bool)
    g1[1:3, 1:3] = True
    g2 = np.zeros((6, 6), dtype=bool)
    a, f = pixel_metrics([AnomalyMap(m1), AnomalyMap(m2)], [g1, g2])
    scores = np.concatenate([m1.reshape(-1), m2.reshape(-1)])
    labels = np.concatenate([g1.reshape(-1), g2.reshape(-1)]).astype(int)
    assert a == pytest.approx(auroc(scores, labels), abs=1e-12)
    assert f == pytest.approx(f1_max(scores, labels), abs=1e-12)
    with pytest.raises(InvalidInputError):
        pixel_metrics([AnomalyMap(m1)], [g1, g2])


# --- dataset ingestion ----------------------------------------------------------


def test_load_mvtec_layout(plates_small_root):
    index = load_dataset(plates_small_root, layout="mvtec")
    assert [c.name for c in index.categories] == ["plates"]
    cat = index.categories[0]
    assert len(cat.train) == 3
    assert len(cat.test) == 8
    labels = sorted(s.label for s in cat.test)
    assert labels == [0, 0, 0, 0, 1, 1, 1, 1]
    for s in cat.test:
        if s.label == 1:
            assert s.mask_path is not None and s.mask_path.exists()
        else:
            assert s.mask_path is None
    assert index.category("plates") is cat
    with pytest.raises(InvalidInputError):
        index.category("bolts")


def test_load_mvtec_errors(tmp_path):
    with pytest.raises(InvalidInputError, match="does not exist"):
        load_dataset(tmp_path / "nope")
    with pytest.raises(InvalidInputError, match="no categories"):
        load_dataset(tmp_path)
    cat = tmp_path / "widget"
    (cat / "train" / "good").mkdir(parents=True)
    (cat / "test" / "good").mkdir(parents=True)
    with pytest.raises(InvalidInputError, match="no reference pool"):
        load_dataset(tmp_path)


def test_load_mvtec_missing_mask(tmp_path):
    from PIL import Image

    cat = tmp_path / "widget"
    for sub in ("train/good", "test/good", "test/dent"):
        (cat / sub).mkdir(parents=True)
    img = Image.new("RGB", (28, 28))
    img.save(cat / "train" / "good" / "000.png")
    img.save(cat / "test" / "good" / "000.png")
    img.save(cat / "test" / "dent" / "000.png")
    with pytest.raises(InvalidInputError, match="missing ground-truth mask"):
        load_dataset(tmp_path)


def test_load_visa_layout(tmp_path):
    from PIL import Image

    (tmp_path / "split_csv").mkdir()
    (tmp_path / "imgs").mkdir()
    rows = [["object", "split", "label", "image", "mask"]]
    for i in range(3):
        name = f"imgs/t{i}.png"
        Image.new("RGB", (28, 28)).save(tmp_path / name)
        rows.append(["candle", "train", "normal", name, ""])
    Image.new("RGB", (28, 28)).save(tmp_path / "imgs/good.png")
    rows.append(["candle", "test", "normal", "imgs/good.png", ""])
    Image.new("RGB", (28, 28)).save(tmp_path / "imgs/bad.png")
    Image.new("L", (28, 28), 255).save(tmp_path / "imgs/bad_mask.png")
    rows.append(["candle", "test", "anomaly", "imgs/bad.png", "imgs/bad_mask.png"])
    with open(tmp_path / "split_csv" / "1cls.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)

    index = load_dataset(tmp_path, layout="visa")
    cat = index.category("candle")
    assert len(cat.train) == 3
    assert [s.label for s in sorted(cat.test, key=lambda s: str(s.path))] == [1, 0]
    anomalous = [s for s in cat.test if s.label == 1][0]
    assert anomalous.mask_path.exists()
    with pytest.raises(InvalidInputError):
        load_dataset(tmp_path, layout="imagenet")


# --- k-shot protocol ------------------------------------------------------------


@pytest.fixture(scope="module")
def plates_report(plates_small_root):
    index = load_dataset(plates_small_root)
    cfg = RunConfig(resolution=112, rotation_mode="off", masking_mode="off")
    return run_fewshot_eval(index, k=1, seeds=3, cfg=cfg, pro_thresholds=50)


def test_fewshot_report_shape(plates_report):
    assert len(plates_report.rows) == 1
    row = plates_report.rows[0]
    assert row.category == "plates"
    assert row.shots == 1
    assert row.n_test == 8
    for name in METRIC_NAMES:
        m = row.metrics[name]
        assert len(m["per_seed"]) == 3
        assert m["mean"] == pytest.approx(float(np.mean(m["per_seed"])), abs=1e-12)
        assert m["std"] == pytest.approx(float(np.std(m["per_seed"])), abs=1e-12)
    assert 0.0 < row.nominal_pixel_fraction < 1.0
    assert row.runtime["bank_build_seconds_mean"] > 0
    assert row.runtime["per_image_seconds_mean"] > 0
    assert plates_report.config["k"] == 1
    assert plates_report.config["seeds"] == 3
    assert plates_report.skipped == []


def test_fewshot_seeds_use_distinct_references(plates_small_root):
    """Seed i draws train[(i-1)k : ik); with k=1 the three banks differ."""
    from patchbank.evaluation import _reference_slice

    index = load_dataset(plates_small_root)
    train = index.categories[0].train
    slices = [_reference_slice(train, 1, i) for i in (1, 2, 3)]
    assert [len(s) for s in slices] == [1, 1, 1]
    assert len({s[0] for s in slices}) == 3


def test_qualified_source_ids_keep_splits_distinct(tmp_path):
    """train/good/000 and test/good/000 must resolve to different feature files."""
    from patchbank.evaluation import _qualified_id

    root = tmp_path / "data"
    a = root / "plates" / "train" / "good" / "000.png"
    b = root / "plates" / "test" / "good" / "000.png"
    for p in (a, b):
        p.parent.mkdir(parents=True, exist_ok=True)
        p.touch()
    assert _qualified_id(a, root) == "plates__train__good__000"
    assert _qualified_id(b, root) == "plates__test__good__000"
    outside = tmp_path / "elsewhere.png"
    outside.touch()
    assert _qualified_id(outside, root) == "elsewhere"


def test_fewshot_skips_small_categories(plates_small_root):
    index = load_dataset(plates_small_root)
    cfg = RunConfig(resolution=112, rotation_mode="off", masking_mode="off")
    report = run_fewshot_eval(index, k=2, seeds=3, cfg=cfg)  # needs 6 > 3 train
    assert report.rows == []
    assert len(report.skipped) == 1
    assert report.skipped[0]["category"] == "plates"
    assert "3" in report.skipped[0]["reason"] and "6" in report.skipped[0]["reason"]


def test_report_serialization(plates_report):
    payload = json.loads(plates_report.to_json())
    assert payload["rows"][0]["category"] == "plates"
    assert set(payload["rows"][0]["metrics"]) == set(METRIC_NAMES)
    assert payload["config"]["resolution"] == 112

    table = list(csv.reader(io.StringIO(plates_report.to_csv())))
    assert table[0] == ["category", "shots", "metric", "mean", "std"]
    body = [r for r in table[1:] if r[0] == "plates"]
    means = [r for r in table[1:] if r[0] == "mean"]
    assert len(body) == len(METRIC_NAMES)
    assert len(means) == len(METRIC_NAMES)
    mean_row = plates_report.mean_row(1)
    for r in means:
        assert float(r[3]) == pytest.approx(mean_row[r[2]], abs=1e-6)


def test_fewshot_selected_categories(plates_small_root):
    index = load_dataset(plates_small_root)
    cfg = RunConfig(resolution=112, rotation_mode="off", masking_mode="off")
    with pytest.raises(InvalidInputError):
        run_fewshot_eval(index, k=1, cfg=cfg, categories=["bolts"])
