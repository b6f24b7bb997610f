"""Detection metrics, dataset ingestion and the k-shot evaluation protocol.

Metrics: image-level AUROC / F1-max / AP and pixel-level AUROC / F1-max /
PRO (per-region overlap).  All of them are rank-based or threshold-sweep
based, hence invariant under strictly increasing transforms of the scores.

Dataset layouts: the folder convention of the common industrial benchmarks
(<root>/<category>/train/good, test/<type>, ground_truth/<type>) plus a CSV
adapter mapping the VisA split file onto the same index.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import InvalidInputError, UndefinedMetricError
from .features import load_image, preprocess_mask
from .pipeline import RunConfig, build_reference_bank, score_image
from .scoring import AnomalyMap

LOGGER = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


# --- scalar metrics -----------------------------------------------------------


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if scores.shape != labels.shape:
        raise InvalidInputError(f"{scores.shape[0]} scores vs {labels.shape[0]} labels")
    if scores.size == 0:
        raise UndefinedMetricError("no samples")
    if not np.isfinite(scores).all():
        raise InvalidInputError("scores contain non-finite values")
    if not np.isin(labels, (0, 1)).all():
        raise InvalidInputError("labels must be 0 or 1")
    return scores, labels


def auroc(scores, labels) -> float:
    """Rank-based area under the ROC curve; ties credited 0.5.

    Equals the Mann-Whitney U statistic normalized by n_pos * n_neg, i.e.
    the probability that a random anomalous sample outranks a random nominal
    one (ties counted half).
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = rankdata(scores)  # average ranks, 1-based
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # Stable descending sort: ties keep input order.
    return np.argsort(-scores, kind="stable")


def f1_max(scores, labels) -> float:
    """Maximum F1 over all thresholds; positive prediction at score >= t.

    The sweep is exact: every distinct score value is a candidate threshold.
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("F1 needs at least one positive")
    order = _descending_order(scores)
    s = scores[order]
    tp = np.cumsum(labels[order])
    # Threshold at each distinct value: take the last index of every run of
    # equal scores (all samples with that score are predicted positive).
    cut = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    predicted = cut + 1.0
    f1 = 2.0 * tp[cut] / (predicted + n_pos)
    return float(f1.max())


def average_precision(scores, labels) -> float:
    """Step-interpolated AP: sum of precision * recall-step over thresholds.

    One step per distinct score value (all samples at a tied value enter
    together), so the result is invariant to input order.
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = _descending_order(scores)
    s = scores[order]
    tp = np.cumsum(labels[order])
    cut = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    precision = tp[cut] / (cut + 1.0)
    recall = tp[cut] / n_pos
    d_recall = np.diff(recall, prepend=0.0)
    return float((precision * d_recall).sum())


def pixel_metrics(maps: list[AnomalyMap], gt_masks: list[np.ndarray]) -> tuple[float, float]:
    """Flatten all pixels across the test set, then AUROC and F1-max."""
    if len(maps) != len(gt_masks):
        raise InvalidInputError(f"{len(maps)} maps vs {len(gt_masks)} masks")
    if not maps:
        raise UndefinedMetricError("no maps")
    flat_scores = []
    flat_labels = []
    for i, (m, g) in enumerate(zip(maps, gt_masks)):
        g = np.asarray(g).astype(bool)
        if m.values.shape != g.shape:
            raise InvalidInputError(
                f"map {i} shape {m.values.shape} != mask shape {g.shape}"
            )
        flat_scores.append(m.values.reshape(-1))
        flat_labels.append(g.reshape(-1))
    scores = np.concatenate(flat_scores)
    labels = np.concatenate(flat_labels).astype(np.int64)
    return auroc(scores, labels), f1_max(scores, labels)


def pro(
    maps: list[AnomalyMap],
    gt_masks: list[np.ndarray],
    fpr_limit: float = 0.3,
    thresholds: int = 200,
    exact: bool = False,
) -> float:
    """Per-region overlap integrated over FPR up to fpr_limit, normalized.

    For each threshold (equally spaced over the observed score range,
    descending; or every distinct value with exact=True): binarize all maps
    at score >= t, compute the mean per-connected-component recall over all
    ground-truth regions (8-connectivity) and the global false-positive
    rate.  The (FPR, mean-PRO) curve, anchored at (0, 0), is integrated by
    the trapezoid rule from 0 to fpr_limit and divided by fpr_limit.
    """
    if len(maps) != len(gt_masks):
        raise InvalidInputError(f"{len(maps)} maps vs {len(gt_masks)} masks")
    if not 0.0 < fpr_limit <= 1.0:
        raise InvalidInputError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    if thresholds < 2:
        raise InvalidInputError(f"need at least 2 thresholds, got {thresholds}")

    region_scores: list[np.ndarray] = []  # sorted ascending, one per gt region
    neg_scores: list[np.ndarray] = []
    all_lo, all_hi = np.inf, -np.inf
    eight = np.ones((3, 3), dtype=bool)
    for i, (m, g) in enumerate(zip(maps, gt_masks)):
        g = np.asarray(g).astype(bool)
        if m.values.shape != g.shape:
            raise InvalidInputError(f"map {i} shape {m.values.shape} != mask shape {g.shape}")
        v = m.values
        all_lo = min(all_lo, float(v.min()))
        all_hi = max(all_hi, float(v.max()))
        labeled, n_regions = ndimage.label(g, structure=eight)
        for r in range(1, n_regions + 1):
            region_scores.append(np.sort(v[labeled == r], axis=None))
        neg_scores.append(v[~g].reshape(-1))
    if not region_scores:
        raise UndefinedMetricError("PRO needs at least one anomalous ground-truth region")
    neg = np.sort(np.concatenate(neg_scores))
    if neg.size == 0:
        raise UndefinedMetricError("PRO needs nominal pixels for a false-positive rate")

    if exact:
        thr = np.unique(np.concatenate([rs for rs in region_scores] + [neg]))[::-1]
    else:
        thr = np.linspace(all_lo, all_hi, thresholds)[::-1]

    # score >= t counts via searchsorted on ascending sorted values
    fpr = (neg.size - np.searchsorted(neg, thr, side="left")) / neg.size
    overlap = np.zeros(thr.size, dtype=np.float64)
    for rs in region_scores:
        overlap += (rs.size - np.searchsorted(rs, thr, side="left")) / rs.size
    overlap /= len(region_scores)

    # Anchor at the empty prediction; thresholds descend, so fpr ascends.
    fpr = np.concatenate([[0.0], fpr])
    overlap = np.concatenate([[0.0], overlap])

    area = 0.0
    for i in range(1, fpr.size):
        f0, f1 = fpr[i - 1], fpr[i]
        y0, y1 = overlap[i - 1], overlap[i]
        if f1 <= f0:
            continue
        if f0 >= fpr_limit:
            break
        if f1 > fpr_limit:
            y1 = y0 + (y1 - y0) * (fpr_limit - f0) / (f1 - f0)
            f1 = fpr_limit
        area += 0.5 * (y0 + y1) * (f1 - f0)
    return float(area / fpr_limit)


# --- dataset ingestion --------------------------------------------------------


@dataclass(frozen=True)
class TestSample:
    path: Path
    label: int  # 0 nominal, 1 anomalous
    anomaly_type: str
    mask_path: Path | None


@dataclass
class CategoryIndex:
    name: str
    train: list[Path]
    test: list[TestSample]


@dataclass
class DatasetIndex:
    root: Path
    layout: str
    categories: list[CategoryIndex]

    def category(self, name: str) -> CategoryIndex:
        for c in self.categories:
            if c.name == name:
                return c
        raise InvalidInputError(f"unknown category {name!r}")


def _image_files(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()
    )


def _load_mvtec(root: Path) -> list[CategoryIndex]:
    categories = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        train_dir = cat_dir / "train" / "good"
        test_dir = cat_dir / "test"
        if not train_dir.is_dir() or not test_dir.is_dir():
            continue  # not a category directory
        train = _image_files(train_dir)
        if not train:
            raise InvalidInputError(f"no reference pool: {train_dir} has no images")
        samples: list[TestSample] = []
        for type_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            anomaly_type = type_dir.name
            label = 0 if anomaly_type == "good" else 1
            for img in _image_files(type_dir):
                mask_path = None
                if label == 1:
                    mask_path = cat_dir / "ground_truth" / anomaly_type / f"{img.stem}_mask.png"
                    if not mask_path.exists():
                        raise InvalidInputError(f"missing ground-truth mask: {mask_path}")
                samples.append(TestSample(img, label, anomaly_type, mask_path))
        if not samples:
            raise InvalidInputError(f"category {cat_dir.name!r} has no test images under {test_dir}")
        categories.append(CategoryIndex(cat_dir.name, train, samples))
    if not categories:
        raise InvalidInputError(f"no categories found under {root}")
    return categories


def _load_visa(root: Path) -> list[CategoryIndex]:
    csv_path = root / "split_csv" / "1cls.csv"
    if not csv_path.exists():
        raise InvalidInputError(f"missing split file: {csv_path}")
    buckets: dict[str, CategoryIndex] = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            cat = row["object"]
            idx = buckets.setdefault(cat, CategoryIndex(cat, [], []))
            img = root / row["image"]
            if not img.exists():
                raise InvalidInputError(f"missing image listed in {csv_path}: {img}")
            if row["split"] == "train":
                idx.train.append(img)
                continue
            label = 0 if row["label"] == "normal" else 1
            mask_path = None
            if label == 1:
                if not row.get("mask"):
                    raise InvalidInputError(f"anomalous image without mask in {csv_path}: {img}")
                mask_path = root / row["mask"]
                if not mask_path.exists():
                    raise InvalidInputError(f"missing ground-truth mask: {mask_path}")
            idx.test.append(TestSample(img, label, row["label"], mask_path))
    if not buckets:
        raise InvalidInputError(f"{csv_path} lists no samples")
    categories = []
    for name in sorted(buckets):
        idx = buckets[name]
        if not idx.train:
            raise InvalidInputError(f"no reference pool: category {name!r} has no train images")
        idx.train.sort()
        idx.test.sort(key=lambda s: str(s.path))
        categories.append(idx)
    return categories


def load_dataset(root, layout: str = "mvtec") -> DatasetIndex:
    """Index a dataset tree; validates that anomalous images have masks."""
    root = Path(root)
    if not root.is_dir():
        raise InvalidInputError(f"dataset root does not exist: {root}")
    if layout == "mvtec":
        categories = _load_mvtec(root)
    elif layout == "visa":
        categories = _load_visa(root)
    else:
        raise InvalidInputError(f"layout must be mvtec or visa, got {layout!r}")
    return DatasetIndex(root, layout, categories)


# --- k-shot protocol ----------------------------------------------------------

METRIC_NAMES = ("image_auroc", "image_f1max", "image_ap", "pixel_auroc", "pixel_f1max", "pro")


@dataclass
class EvalRow:
    category: str
    shots: int
    metrics: dict  # name -> {"mean": float, "std": float, "per_seed": [...]}
    runtime: dict
    n_test: int
    nominal_pixel_fraction: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    skipped: list[dict]
    config: dict

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "skipped": self.skipped,
            "rows": [
                {
                    "category": r.category,
                    "shots": r.shots,
                    "metrics": r.metrics,
                    "runtime": r.runtime,
                    "n_test": r.n_test,
                    "nominal_pixel_fraction": r.nominal_pixel_fraction,
                }
                for r in self.rows
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["category", "shots", "metric", "mean", "std"])
        for r in self.rows:
            for name in METRIC_NAMES:
                m = r.metrics[name]
                writer.writerow([r.category, r.shots, name, f"{m['mean']:.6f}", f"{m['std']:.6f}"])
        for shots in sorted({r.shots for r in self.rows}):
            means = self.mean_row(shots)
            for name in METRIC_NAMES:
                writer.writerow(["mean", shots, name, f"{means[name]:.6f}", ""])
        return buf.getvalue()

    def mean_row(self, shots: int) -> dict:
        """Across-category mean of per-metric means for one shot count."""
        rows = [r for r in self.rows if r.shots == shots]
        if not rows:
            raise InvalidInputError(f"no rows for shots={shots}")
        return {
            name: float(np.mean([r.metrics[name]["mean"] for r in rows]))
            for name in METRIC_NAMES
        }


def _qualified_id(path: Path, root: Path) -> str:
    """Dataset-relative source id: path parts joined with "__", suffix dropped.

    Keeps same-named images from different categories or splits distinct, so
    one precomputed-feature directory can serve a whole dataset evaluation.
    Paths outside the root fall back to the bare stem.
    """
    try:
        rel = Path(path).resolve().relative_to(Path(root).resolve())
    except ValueError:
        return Path(path).stem
    return "__".join(rel.with_suffix("").parts)


def _reference_slice(train: list[Path], k: int, seed_index: int) -> list[Path]:
    # Seed i uses the i-th disjoint block of k images in sorted filename order.
    lo = (seed_index - 1) * k
    return train[lo : lo + k]


def run_fewshot_eval(
    index: DatasetIndex,
    k: int,
    seeds: int = 3,
    cfg: RunConfig | None = None,
    categories: list[str] | None = None,
    pro_thresholds: int = 200,
    with_progress: bool = False,
) -> EvalReport:
    """k-shot evaluation over every category: 6 metrics, mean and std over seeds.

    Seed i (1-based) takes train images [(i-1)*k, i*k) in sorted filename
    order as the reference set.  Categories with fewer than seeds*k train
    images are skipped with a warning.  Deterministic: two runs produce
    bit-identical reports.
    """
    if k < 1 or seeds < 1:
        raise InvalidInputError(f"k and seeds must be >= 1, got k={k} seeds={seeds}")
    cfg = cfg or RunConfig()
    rows: list[EvalRow] = []
    skipped: list[dict] = []
    wanted = set(categories) if categories is not None else None
    if wanted:
        known = {c.name for c in index.categories}
        missing = sorted(wanted - known)
        if missing:
            raise InvalidInputError(f"unknown categories: {missing}; have {sorted(known)}")

    for cat in index.categories:
        if wanted is not None and cat.name not in wanted:
            continue
        if len(cat.train) < seeds * k:
            msg = (
                f"category {cat.name!r} has {len(cat.train)} train images, "
                f"needs {seeds * k} for k={k} seeds={seeds}"
            )
            LOGGER.warning("skipping: %s", msg)
            skipped.append({"category": cat.name, "reason": msg})
            continue

        per_seed: dict[str, list[float]] = {name: [] for name in METRIC_NAMES}
        build_times: list[float] = []
        score_times: list[float] = []
        nominal_fraction = 0.0
        for i in range(1, seeds + 1):
            refs = _reference_slice(cat.train, k, i)
            bundle = build_reference_bank(
                refs,
                cfg,
                category=cat.name,
                source_ids=[_qualified_id(p, index.root) for p in refs],
            )
            build_times.append(bundle.build_seconds)

            scores, labels, maps, gts = [], [], [], []
            t0 = time.perf_counter()
            for sample in cat.test:
                scored = score_image(
                    sample.path,
                    bundle.bank,
                    cfg,
                    source_id=_qualified_id(sample.path, index.root),
                )
                scores.append(scored.score)
                labels.append(sample.label)
                maps.append(scored.amap)
                if sample.label == 1:
                    gt = preprocess_mask(
                        _load_mask(sample.mask_path), cfg.preprocess_config(cat.name)
                    )
                else:
                    gt = np.zeros((scored.pre_h, scored.pre_w), dtype=bool)
                gts.append(gt)
            score_times.append((time.perf_counter() - t0) / max(1, len(cat.test)))

            per_seed["image_auroc"].append(auroc(scores, labels))
            per_seed["image_f1max"].append(f1_max(scores, labels))
            per_seed["image_ap"].append(average_precision(scores, labels))
            px_auroc, px_f1 = pixel_metrics(maps, gts)
            per_seed["pixel_auroc"].append(px_auroc)
            per_seed["pixel_f1max"].append(px_f1)
            per_seed["pro"].append(pro(maps, gts, thresholds=pro_thresholds))
            total_px = sum(g.size for g in gts)
            nominal_fraction = 1.0 - sum(int(g.sum()) for g in gts) / total_px
            if with_progress:
                LOGGER.info("%s k=%d seed %d done", cat.name, k, i)

        metrics = {
            name: {
                "mean": float(np.mean(vals)),
                "std": float(np.std(vals)),
                "per_seed": [float(v) for v in vals],
            }
            for name, vals in per_seed.items()
        }
        runtime = {
            "bank_build_seconds_mean": float(np.mean(build_times)),
            "per_image_seconds_mean": float(np.mean(score_times)),
        }
        rows.append(
            EvalRow(
                category=cat.name,
                shots=k,
                metrics=metrics,
                runtime=runtime,
                n_test=len(cat.test),
                nominal_pixel_fraction=float(nominal_fraction),
            )
        )

    return EvalReport(rows=rows, skipped=skipped, config={**cfg.as_dict(), "k": k, "seeds": seeds})


def _load_mask(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0
