"""Seeded synthetic datasets for tests, demos and benchmarks.

Reference grids are filled with half-normal activations (nonnegative, like
rectified CNN outputs); each query is its reference grid plus Gaussian
noise scaled to a fraction of the reference RMS, with identity ground
truth. Generation is deterministic per seed, and the noise is mild enough
that the true frame stays the best match, which is what the end-to-end
benchmarks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_io import (
    FeatureGrid,
    read_grid,
    write_grid,
    write_ground_truth,
    write_manifest,
)


@dataclass(frozen=True)
class SyntheticDataset:
    root: Path
    reference_manifest: Path
    query_manifest: Path
    ground_truth: Path
    image_count: int


def generate_synthetic_dataset(
    out_dir: str | Path,
    image_count: int = 50,
    depth: int = 64,
    noise_ratio: float = 0.05,
    seed: int = 0,
    stage1_side: int = 14,
    stage2_side: int = 28,
) -> SyntheticDataset:
    """Write a complete reference/query dataset under `out_dir`.

    Layout: reference/ and query/ grid directories, reference.csv and
    query.csv manifests (relative paths), ground_truth.csv mapping each
    query frame to itself.
    """
    if image_count < 1:
        raise ValueError("image_count must be positive")
    if depth < 1:
        raise ValueError("depth must be positive")
    if not (0.0 <= noise_ratio < 1.0):
        raise ValueError("noise_ratio must be in [0, 1)")
    root = Path(out_dir)
    ref_dir = root / "reference"
    query_dir = root / "query"
    ref_dir.mkdir(parents=True, exist_ok=True)
    query_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    sum_sq = {1: 0.0, 2: 0.0}
    counts = {1: 0, 2: 0}
    ref_rows = []
    for frame in range(image_count):
        for stage, side in ((1, stage1_side), (2, stage2_side)):
            values = np.abs(rng.standard_normal((side, side, depth))).astype(np.float32)
            sum_sq[stage] += float((values.astype(np.float64) ** 2).sum())
            counts[stage] += values.size
            write_grid(FeatureGrid(values), ref_dir / f"{frame:04d}_s{stage}.fgt")
        ref_rows.append(
            (frame, f"reference/{frame:04d}_s1.fgt", f"reference/{frame:04d}_s2.fgt")
        )

    rms = {stage: float(np.sqrt(sum_sq[stage] / counts[stage])) for stage in (1, 2)}
    query_rows = []
    for frame in range(image_count):
        for stage in (1, 2):
            ref = read_grid(ref_dir / f"{frame:04d}_s{stage}.fgt")
            noise = rng.standard_normal(ref.data.shape) * (noise_ratio * rms[stage])
            noisy = (ref.data.astype(np.float64) + noise).astype(np.float32)
            write_grid(FeatureGrid(noisy), query_dir / f"{frame:04d}_s{stage}.fgt")
        query_rows.append(
            (frame, f"query/{frame:04d}_s1.fgt", f"query/{frame:04d}_s2.fgt")
        )

    reference_manifest = root / "reference.csv"
    query_manifest = root / "query.csv"
    ground_truth = root / "ground_truth.csv"
    write_manifest(reference_manifest, ref_rows, header_comment="synthetic reference traverse")
    write_manifest(query_manifest, query_rows, header_comment="synthetic query traverse")
    write_ground_truth(ground_truth, [(frame, frame) for frame in range(image_count)])
    return SyntheticDataset(
        root=root,
        reference_manifest=reference_manifest,
        query_manifest=query_manifest,
        ground_truth=ground_truth,
        image_count=image_count,
    )
