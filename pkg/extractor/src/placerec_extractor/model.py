"""Truncated VGG16 backbone with activation taps.

The engine consumes two grids per image: 14x14x512 activations taken
after the second convolution of block 5 and 28x28x512 activations taken
after the second convolution of block 4, both post-ReLU, for 224x224 RGB
inputs. This module builds the truncated network, loads pretrained
weights and runs inference; everything downstream of the forward pass
(files, manifests) lives in `export`.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torchvision.models import vgg16

log = logging.getLogger("placerec_extractor")

# indices into vgg16().features of the ReLU outputs we export
STAGE1_TAP = 27  # block 5, second conv -> 14x14x512
STAGE2_TAP = 20  # block 4, second conv -> 28x28x512

WEIGHT_SOURCES = ("places205", "imagenet")


def _feature_weights(state_dict: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Normalize a checkpoint to the truncated feature stack's keys.

    Accepts either a full-model state dict (`features.N.*` keys, classifier
    entries ignored) or a features-only one (`N.*` keys). Weights past the
    last tap are dropped.
    """
    if any(key.startswith("features.") for key in state_dict):
        items = {
            key[len("features."):]: value
            for key, value in state_dict.items()
            if key.startswith("features.")
        }
    else:
        items = dict(state_dict)
    kept = {}
    for key, value in items.items():
        head = key.split(".", 1)[0]
        try:
            index = int(head)
        except ValueError:
            raise ValueError(f"unrecognized checkpoint key {key!r}") from None
        if index <= STAGE1_TAP:
            kept[key] = value
    return kept


def build_backbone(
    state_dict: Mapping[str, torch.Tensor] | None = None,
) -> torch.nn.Sequential:
    """VGG16 feature layers up to and including the stage-1 tap.

    With `state_dict=None` the network keeps torch's default random
    initialization, which is only useful for exercising the export
    pipeline offline; real extractions must load pretrained weights (see
    `resolve_weights`).
    """
    trunk = vgg16(weights=None).features[: STAGE1_TAP + 1]
    if state_dict is not None:
        trunk.load_state_dict(_feature_weights(state_dict))
    for index in (STAGE2_TAP, STAGE1_TAP):
        if not isinstance(trunk[index], torch.nn.ReLU):
            raise ValueError(f"layer {index} is not a ReLU; wrong architecture")
    trunk.eval()
    trunk.requires_grad_(False)
    return trunk


def resolve_weights(
    source: str = "places205", weights_file: str | Path | None = None
) -> tuple[dict[str, torch.Tensor], str]:
    """Load a checkpoint for `build_backbone`; returns (state_dict, provenance).

    A `weights_file` always wins and is recorded under the requested source
    name. Without one there is no packaged places205 checkpoint, so that
    request falls back to torchvision's ImageNet weights with a warning;
    the provenance string records the substitution so it ends up in the
    manifest header.
    """
    if source not in WEIGHT_SOURCES:
        raise ValueError(f"unknown weight source {source!r}; expected one of {WEIGHT_SOURCES}")
    if weights_file is not None:
        state = torch.load(weights_file, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        return state, f"{source} ({Path(weights_file).name})"
    provenance = "imagenet (torchvision IMAGENET1K_V1)"
    if source == "places205":
        log.warning(
            "no packaged places205 checkpoint; falling back to imagenet weights "
            "(pass --weights-file to use a places205 checkpoint)"
        )
        provenance = "imagenet (fallback from places205; torchvision IMAGENET1K_V1)"
    from torchvision.models import VGG16_Weights

    return VGG16_Weights.IMAGENET1K_V1.get_state_dict(progress=False), provenance


class FeatureExtractor:
    """Runs the truncated backbone and returns height x width x depth grids."""

    def __init__(self, trunk: torch.nn.Sequential):
        if len(trunk) != STAGE1_TAP + 1:
            raise ValueError(f"expected {STAGE1_TAP + 1} layers, got {len(trunk)}")
        for index in (STAGE2_TAP, STAGE1_TAP):
            if not isinstance(trunk[index], torch.nn.ReLU):
                raise ValueError(f"layer {index} is not a ReLU; wrong architecture")
        self.trunk = trunk.eval()

    def grids(self, image: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        """(stage1, stage2) float32 grids for one preprocessed 3x224x224 image."""
        if tuple(image.shape) != (3, 224, 224):
            raise ValueError(f"expected a 3x224x224 tensor, got {tuple(image.shape)}")
        taps = {}
        with torch.inference_mode():
            x = image.unsqueeze(0)
            for index, layer in enumerate(self.trunk):
                x = layer(x)
                if index == STAGE2_TAP:
                    taps[2] = x
                elif index == STAGE1_TAP:
                    taps[1] = x

        def to_grid(batch: torch.Tensor) -> np.ndarray:
            return np.ascontiguousarray(
                batch[0].permute(1, 2, 0).numpy(), dtype=np.float32
            )

        stage1, stage2 = to_grid(taps[1]), to_grid(taps[2])
        if stage1.shape != (14, 14, 512) or stage2.shape != (28, 28, 512):
            raise ValueError(
                f"unexpected activation shapes {stage1.shape} / {stage2.shape}"
            )
        return stage1, stage2
