import numpy as np
import pytest
import torch
from PIL import Image

from placerec_extractor import FeatureExtractor, build_backbone


@pytest.fixture(scope="session")
def extractor():
    """Backbone with seeded random weights; enough for format and
    determinism checks, which never look at what the features mean."""
    torch.manual_seed(1234)
    return FeatureExtractor(build_backbone())


@pytest.fixture
def image_dir(tmp_path):
    """Three small decodable images with deliberately mixed formats/sizes."""
    rng = np.random.default_rng(7)
    root = tmp_path / "images"
    root.mkdir()
    Image.fromarray(
        rng.integers(0, 256, (48, 64, 3), dtype=np.uint8)
    ).save(root / "a_dawn.png")
    Image.fromarray(
        np.tile(np.linspace(0, 255, 96, dtype=np.uint8), (72, 1))
    ).convert("RGB").save(root / "b_noon.jpg")
    Image.new("RGB", (224, 224), (40, 90, 160)).save(root / "c_dusk.jpg")
    return root
