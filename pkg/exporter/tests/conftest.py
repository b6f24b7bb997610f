import numpy as np
import pytest
from PIL import Image

from pfv_exporter.backbones import StubExtractor
from pfv_exporter.export import export_features

# (height, width) pairs covering square, portrait, landscape, odd sizes,
# and the documented geometry examples (750x1000 and 600x900 at 448).
IMAGE_SIZES = [
    (448, 448),
    (750, 1000),
    (600, 900),
    (1000, 750),
    (900, 600),
    (224, 224),
    (320, 480),
    (480, 320),
    (500, 500),
    (336, 448),
    (448, 336),
    (700, 700),
    (525, 700),
    (1024, 768),
    (768, 1024),
    (650, 433),
    (433, 650),
    (800, 800),
    (462, 462),
    (294, 441),
    (640, 427),
]


def write_noise_png(path, height, width, seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    Image.fromarray(img).save(path)


@pytest.fixture(scope="session")
def image_root(tmp_path_factory):
    """Flat folder of varied-size noise images; returns (root, {stem: (h, w)})."""
    root = tmp_path_factory.mktemp("exporter_images")
    sizes = {}
    for idx, (h, w) in enumerate(IMAGE_SIZES):
        stem = f"img{idx:02d}"
        write_noise_png(root / f"{stem}.png", h, w, seed=1000 + idx)
        sizes[stem] = (h, w)
    return root, sizes


@pytest.fixture(scope="session")
def stub_export(tmp_path_factory, image_root):
    """One shared stub export of the flat image folder at 448."""
    root, _ = image_root
    out = tmp_path_factory.mktemp("exporter_out")
    manifest = export_features(root, "small", 448, out, extractor=StubExtractor("small"))
    return out, manifest
