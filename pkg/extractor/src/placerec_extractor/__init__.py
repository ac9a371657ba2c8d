"""VGG16 activation grid exporter for the placerec engine."""

from .export import (
    ExtractionJob,
    ExtractionResult,
    extract_dataset,
    list_images,
    load_image,
    write_grid,
)
from .model import (
    STAGE1_TAP,
    STAGE2_TAP,
    FeatureExtractor,
    build_backbone,
    resolve_weights,
)

__version__ = "0.1.0"

__all__ = [
    "ExtractionJob",
    "ExtractionResult",
    "FeatureExtractor",
    "STAGE1_TAP",
    "STAGE2_TAP",
    "build_backbone",
    "extract_dataset",
    "list_images",
    "load_image",
    "resolve_weights",
    "write_grid",
    "__version__",
]
