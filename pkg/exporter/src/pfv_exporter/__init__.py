"""Feature exporter: run a pretrained backbone over images, emit .pfv files.

The scoring engine consumes the output through its file-based backbone; the
two sides share only the .pfv byte layout and the preprocessing geometry
rule, both restated here.
"""

from .backbones import EMBED_DIMS, DinoV2Extractor, ExtractorError, StubExtractor
from .export import ExportManifest, export_features, verify_manifest
from .geometry import PATCH_PX, grid_shape, preprocess, scaled_size

__all__ = [
    "EMBED_DIMS",
    "DinoV2Extractor",
    "ExtractorError",
    "StubExtractor",
    "ExportManifest",
    "export_features",
    "verify_manifest",
    "PATCH_PX",
    "grid_shape",
    "preprocess",
    "scaled_size",
]
