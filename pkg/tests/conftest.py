import numpy as np
import pytest

from placerec.synthetic import generate_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small seeded dataset shared by the slower end-to-end tests."""
    root = tmp_path_factory.mktemp("tiny")
    return generate_synthetic_dataset(
        root, image_count=10, depth=8, noise_ratio=0.05, seed=11
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
