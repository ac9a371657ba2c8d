import numpy as np
import pytest
import torch
from PIL import Image
from torchvision.models import vgg16

from placerec_extractor import build_backbone, load_image
from placerec_extractor.model import STAGE1_TAP, STAGE2_TAP, FeatureExtractor


class TestBackbone:
    def test_taps_are_relu_outputs(self):
        trunk = build_backbone()
        assert len(trunk) == STAGE1_TAP + 1
        assert isinstance(trunk[STAGE1_TAP], torch.nn.ReLU)
        assert isinstance(trunk[STAGE2_TAP], torch.nn.ReLU)

    def test_loads_full_model_checkpoint(self):
        torch.manual_seed(3)
        source = vgg16(weights=None)
        trunk = build_backbone(source.state_dict())
        expected = source.features[0].weight.detach()
        assert torch.equal(trunk[0].weight, expected)

    def test_loads_features_only_checkpoint(self):
        torch.manual_seed(4)
        source = vgg16(weights=None).features
        trunk = build_backbone(source.state_dict())
        assert torch.equal(trunk[19].weight, source[19].weight.detach())

    def test_rejects_unrecognized_keys(self):
        with pytest.raises(ValueError, match="unrecognized checkpoint key"):
            build_backbone({"encoder.weight": torch.zeros(1)})

    def test_rejects_wrong_architecture(self):
        layers = torch.nn.Sequential(*[torch.nn.Identity() for _ in range(28)])
        with pytest.raises(ValueError, match="not a ReLU"):
            FeatureExtractor(layers)
        with pytest.raises(ValueError, match="expected 28 layers"):
            FeatureExtractor(torch.nn.Sequential(torch.nn.ReLU()))


class TestGrids:
    def test_shapes(self, extractor):
        torch.manual_seed(0)
        stage1, stage2 = extractor.grids(torch.randn(3, 224, 224))
        assert stage1.shape == (14, 14, 512)
        assert stage2.shape == (28, 28, 512)
        assert stage1.dtype == np.float32

    def test_activations_are_nonnegative(self, extractor):
        torch.manual_seed(1)
        stage1, stage2 = extractor.grids(torch.randn(3, 224, 224))
        assert stage1.min() >= 0.0  # both taps sit after a ReLU
        assert stage2.min() >= 0.0

    def test_black_image_gives_finite_grids(self, extractor, tmp_path):
        path = tmp_path / "black.jpg"
        Image.new("RGB", (224, 224)).save(path)
        stage1, stage2 = extractor.grids(load_image(path))
        assert np.isfinite(stage1).all()
        assert np.isfinite(stage2).all()

    def test_repeat_runs_are_bit_identical(self, extractor):
        torch.manual_seed(2)
        image = torch.randn(3, 224, 224)
        first = extractor.grids(image)
        second = extractor.grids(image.clone())
        assert np.array_equal(first[0], second[0])
        assert np.array_equal(first[1], second[1])

    def test_rejects_wrong_input_shape(self, extractor):
        with pytest.raises(ValueError, match="3x224x224"):
            extractor.grids(torch.randn(3, 128, 128))


class TestLoadImage:
    def test_resizes_and_normalizes(self, tmp_path):
        path = tmp_path / "gray.png"
        Image.new("RGB", (90, 30), (128, 128, 128)).save(path)
        tensor = load_image(path)
        assert tuple(tensor.shape) == (3, 224, 224)
        expected = (128 / 255 - 0.485) / 0.229
        assert abs(float(tensor[0, 100, 100]) - expected) < 1e-5

    def test_grayscale_input_is_promoted_to_rgb(self, tmp_path):
        path = tmp_path / "mono.png"
        Image.new("L", (50, 50), 200).save(path)
        assert tuple(load_image(path).shape) == (3, 224, 224)

    def test_undecodable_file_raises(self, tmp_path):
        path = tmp_path / "fake.jpg"
        path.write_text("this is not an image")
        with pytest.raises(OSError):
            load_image(path)
