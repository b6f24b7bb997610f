"""Feature extractors: pretrained DINOv2 backbones and a deterministic stub."""

from __future__ import annotations

import logging

import numpy as np

from .geometry import PATCH_PX

LOGGER = logging.getLogger(__name__)

# Embedding widths of the DINOv2 distillation sizes, per the published
# model cards; "giant" is deliberately unsupported.
EMBED_DIMS = {"small": 384, "base": 768, "large": 1024}

HUB_REPO = "facebookresearch/dinov2"
HUB_MODELS = {"small": "dinov2_vits14", "base": "dinov2_vitb14", "large": "dinov2_vitl14"}

_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class ExtractorError(RuntimeError):
    """Backbone could not be loaded or produced unusable output."""


def _check_size(size_id: str) -> None:
    if size_id not in EMBED_DIMS:
        raise ExtractorError(
            f"unknown backbone size {size_id!r} (expected one of {sorted(EMBED_DIMS)})"
        )


class StubExtractor:
    """Deterministic offline extractor for pipeline validation.

    Emits a fixed sinusoidal projection of per-patch channel statistics at
    the requested size's embedding width.  No pretrained weights, identical
    output across runs and machines; useful for exercising the export and
    interchange path where real features are unavailable or irrelevant.
    """

    def __init__(self, size_id: str):
        _check_size(size_id)
        self.name = f"stub-{size_id}"
        self.dim = EMBED_DIMS[size_id]
        rng = np.random.default_rng(0xD1A0)
        self._weights = rng.normal(size=(self.dim, 6))
        self._bias = rng.uniform(0.0, 2.0 * np.pi, size=self.dim)

    def features(self, img: np.ndarray) -> np.ndarray:
        gh, gw = img.shape[0] // PATCH_PX, img.shape[1] // PATCH_PX
        cells = (
            img[: gh * PATCH_PX, : gw * PATCH_PX]
            .reshape(gh, PATCH_PX, gw, PATCH_PX, 3)
            .astype(np.float64)
            / 255.0
        )
        stats = np.concatenate(
            [cells.mean(axis=(1, 3)), cells.std(axis=(1, 3))], axis=2
        )  # (gh, gw, 6)
        out = np.sin(stats @ self._weights.T * 2.0 + self._bias)
        return out.astype(np.float32)


class DinoV2Extractor:
    """Final-layer patch tokens from a pretrained DINOv2 backbone.

    The class token is dropped and no layer aggregation is applied; files
    store the raw tokens (the engine normalizes).  Inference runs on CPU in
    no-grad eval mode, so re-exports are deterministic.
    """

    def __init__(self, size_id: str):
        _check_size(size_id)
        self.name = HUB_MODELS[size_id]
        self.dim = EMBED_DIMS[size_id]
        try:
            import torch
        except ImportError as exc:
            raise ExtractorError(
                "torch is required for pretrained backbones; install the "
                "'torch' extra or use the stub extractor"
            ) from exc
        self._torch = torch
        try:
            self._model = torch.hub.load(HUB_REPO, HUB_MODELS[size_id])
        except Exception as exc:
            raise ExtractorError(
                f"could not load pretrained weights for {size_id!r}: {exc}"
            ) from exc
        self._model.eval()

    def features(self, img: np.ndarray) -> np.ndarray:
        torch = self._torch
        gh, gw = img.shape[0] // PATCH_PX, img.shape[1] // PATCH_PX
        x = (img.astype(np.float32) / 255.0 - _IMAGENET_MEAN) / _IMAGENET_STD
        batch = torch.from_numpy(np.transpose(x, (2, 0, 1))).unsqueeze(0)
        with torch.inference_mode():
            tokens = self._model.forward_features(batch)["x_norm_patchtokens"]
        out = tokens.squeeze(0).reshape(gh, gw, -1).cpu().numpy().astype(np.float32)
        if out.shape[2] != self.dim:
            raise ExtractorError(
                f"backbone returned width {out.shape[2]}, expected {self.dim}"
            )
        return out


def make_extractor(size_id: str, stub: bool = False):
    return StubExtractor(size_id) if stub else DinoV2Extractor(size_id)
