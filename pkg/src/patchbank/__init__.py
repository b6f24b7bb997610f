"""Training-free patch-level nearest-neighbor anomaly detection.

Build a memory bank of nominal patch features, score test images by
cosine nearest-neighbor patch distance, aggregate the distance tail into
an image score, and upsample per-patch distances into pixel anomaly maps.
Includes zero-shot foreground masking, rotation augmentation, batched
mutual scoring without references, and an evaluation/benchmark harness.
"""

from .batched import BatchedConfig, batched_run, mutual_patch_scores, tail_count
from .errors import (
    DegenerateInputError,
    EmptyInputError,
    FormatError,
    InvalidInputError,
    PatchbankError,
    UndefinedMetricError,
)
from .features import (
    PATCH_PX,
    Backbone,
    PatchFeatureGrid,
    PreprocessConfig,
    load_image,
    predict_grid_shape,
    preprocess_image,
    resolve_backbone,
    rotate_image,
    toy_extract,
)
from .kernels import active_kernel, available_kernels, use_kernel
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
from .memory import (
    MemoryBank,
    build_bank,
    coreset_reduce,
    cosine_distance,
    load_bank,
    nn_distance,
    normalize_rows,
    save_bank,
    score_grid,
)
from .evaluation import (
    DatasetIndex,
    EvalReport,
    auroc,
    average_precision,
    f1_max,
    load_dataset,
    pixel_metrics,
    pro,
    run_fewshot_eval,
)
from .pfv import read_feature_file, write_feature_file
from .pipeline import (
    RunConfig,
    ScoredImage,
    build_reference_bank,
    resolve_threads,
    score_image,
)
from .scoring import (
    AnomalyMap,
    PatchDistances,
    ScoreConfig,
    aggregate,
    export_heatmap,
    make_map,
)

__version__ = "0.1.0"

__all__ = [
    "AnomalyMap",
    "Backbone",
    "BatchedConfig",
    "DatasetIndex",
    "DegenerateInputError",
    "EmptyInputError",
    "EvalReport",
    "FormatError",
    "InvalidInputError",
    "MaskPolicy",
    "MaskTestResult",
    "MemoryBank",
    "PATCH_PX",
    "PatchbankError",
    "PatchDistances",
    "PatchFeatureGrid",
    "PatchMask",
    "PreprocessConfig",
    "RunConfig",
    "ScoreConfig",
    "ScoredImage",
    "UndefinedMetricError",
    "active_kernel",
    "aggregate",
    "auroc",
    "available_kernels",
    "average_precision",
    "batched_run",
    "build_bank",
    "build_reference_bank",
    "compute_mask",
    "coreset_reduce",
    "cosine_distance",
    "export_heatmap",
    "f1_max",
    "fit_pca_direction",
    "load_bank",
    "load_dataset",
    "load_image",
    "make_map",
    "masking_test",
    "mutual_patch_scores",
    "nn_distance",
    "normalize_rows",
    "patch_mask",
    "pixel_metrics",
    "predict_grid_shape",
    "preprocess_image",
    "pro",
    "read_feature_file",
    "refine_mask",
    "resolve_backbone",
    "resolve_mask_mode",
    "resolve_threads",
    "rotate_image",
    "run_fewshot_eval",
    "save_bank",
    "score_grid",
    "score_image",
    "tail_count",
    "toy_extract",
    "use_kernel",
    "write_feature_file",
]
