"""Batch export: an image directory in, `.fgt` grids and a manifest out.

The on-disk contract is the engine's: `.fgt` files carry a `FGT1` magic,
three little-endian uint32 dimensions and a row-major float32 payload;
the manifest is a CSV of `frame_id,stage1_path,stage2_path` rows with `#`
comment lines, paths relative to the manifest. This module writes that
format directly so the extractor stays a standalone producer.

Frame ids are positions in the filename-sorted listing of the image
directory. An image that fails to decode is skipped with a warning and
leaves a hole in the numbering, which keeps surviving frames aligned with
any externally produced ground truth. The manifest is written last, after
every grid file it mentions.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .model import FeatureExtractor

log = logging.getLogger("placerec_extractor")

GRID_MAGIC = b"FGT1"

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff", ".webp"}

# channel statistics matching the pretrained weights' training pipeline
NORMALIZE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
NORMALIZE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def load_image(path: str | Path) -> torch.Tensor:
    """Decode, scale to 224x224 RGB and normalize; returns a 3x224x224 tensor."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((224, 224), Image.BILINEAR)
    values = np.asarray(rgb, dtype=np.float32) / 255.0
    values = (values - NORMALIZE_MEAN) / NORMALIZE_STD
    return torch.from_numpy(np.ascontiguousarray(values.transpose(2, 0, 1)))


def write_grid(path: str | Path, values: np.ndarray) -> None:
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D grid, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("grid contains non-finite values")
    header = GRID_MAGIC + struct.pack("<III", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


def list_images(directory: str | Path) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise NotADirectoryError(f"{root} is not a directory")
    return sorted(
        p for p in root.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


@dataclass(frozen=True)
class ExtractionJob:
    image_dir: Path
    out_dir: Path


@dataclass(frozen=True)
class ExtractionResult:
    manifest: Path
    exported: int
    skipped: int


def extract_dataset(
    job: ExtractionJob, extractor: FeatureExtractor, provenance: str
) -> ExtractionResult:
    """Export both grids per image plus `manifest.csv` into `job.out_dir`.

    Inference runs single threaded so repeated runs produce bit-identical
    files.
    """
    images = list_images(job.image_dir)
    if not images:
        raise ValueError(f"no images found in {job.image_dir}")
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)

    rows: list[tuple[int, str, str]] = []
    skipped = 0
    for frame, path in enumerate(images):
        try:
            tensor = load_image(path)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            skipped += 1
            continue
        stage1, stage2 = extractor.grids(tensor)
        names = (f"{frame:04d}_s1.fgt", f"{frame:04d}_s2.fgt")
        write_grid(out / names[0], stage1)
        write_grid(out / names[1], stage2)
        rows.append((frame, names[0], names[1]))
    if not rows:
        raise ValueError(f"no decodable images in {job.image_dir}")

    manifest = out / "manifest.csv"
    lines = [
        f"# feature grids extracted from {job.image_dir}",
        f"# weights: {provenance}",
    ]
    lines.extend(f"{frame},{s1},{s2}" for frame, s1, s2 in rows)
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ExtractionResult(manifest=manifest, exported=len(rows), skipped=skipped)
