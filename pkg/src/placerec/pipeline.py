"""Shared orchestration: configuration plus the fit / build / query flow.

The CLI and the benchmark harness both compose the same five steps: read
grids, turn them into normalized cube descriptors, compress with a fitted
PCA model, search the filtering database, then re-rank spatially. This
module owns that plumbing so both entry points behave identically.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .descriptor import (
    CubeSpec,
    CubeVectorSet,
    PcaFitAccumulator,
    PcaModel,
    extract_cubes,
    normalize_grid,
    project_cube_set,
)
from .filtering import (
    CandidateList,
    ImageFilterDb,
    build_image_filter_db,
    filter_stage,
)
from .spatial import (
    MatchResult,
    SpatialMatchDb,
    build_spatial_match_db,
    cube_set_to_grid,
    spatial_stage,
)
from .tensor_io import DatasetManifest, FeatureGrid, ManifestEntry, read_grid

DEFAULT_STAGE1_CUBE = CubeSpec(7, 2)
DEFAULT_STAGE2_CUBE = CubeSpec(3, 2)


@dataclass
class PipelineConfig:
    """Operating point of the two-stage pipeline.

    Defaults: 100 PCA components, 50 stage-1 candidates, ±2 frame
    tolerance, 7x7 stride-2 cubes for filtering and 3x3 stride-2 cubes
    for spatial matching.
    """

    output_dim: int = 100
    candidates: int = 50
    tolerance: int = 2
    stage1_cube: CubeSpec = field(default_factory=lambda: DEFAULT_STAGE1_CUBE)
    stage2_cube: CubeSpec = field(default_factory=lambda: DEFAULT_STAGE2_CUBE)
    threads: int | None = None
    rank_weighted: bool = False
    max_fit_samples: int | None = None
    recall_values: tuple[int, ...] = (1, 5, 10, 25, 50)
    tolerance_values: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    pr_tolerances: tuple[int, ...] = (1, 2, 3)
    pca_dims: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.output_dim < 1:
            raise ValueError("output_dim must be positive")
        if self.candidates < 1:
            raise ValueError("candidates must be positive")
        if self.tolerance < 0:
            raise ValueError("tolerance must be nonnegative")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be positive when given")
        if self.max_fit_samples is not None and self.max_fit_samples < 2:
            raise ValueError("max_fit_samples must be at least 2")
        self.recall_values = tuple(int(n) for n in self.recall_values)
        self.tolerance_values = tuple(int(t) for t in self.tolerance_values)
        self.pr_tolerances = tuple(int(t) for t in self.pr_tolerances)
        self.pca_dims = tuple(int(d) for d in self.pca_dims)
        if any(n < 1 for n in self.recall_values):
            raise ValueError("recall_values must be positive")
        if any(t < 0 for t in self.tolerance_values + self.pr_tolerances):
            raise ValueError("tolerance values must be nonnegative")
        if list(self.tolerance_values) != sorted(self.tolerance_values):
            raise ValueError("tolerance_values must be ascending")
        if any(d < 1 or d > self.output_dim for d in self.pca_dims):
            raise ValueError("pca_dims entries must be in [1, output_dim]")

    def effective_threads(self) -> int:
        if self.threads is not None:
            return self.threads
        return os.cpu_count() or 1

    def to_dict(self) -> dict:
        """JSON-friendly echo of everything that affects the results.

        Thread count is deliberately omitted: it changes scheduling only,
        never output, and reports must compare equal across thread counts.
        """
        return {
            "output_dim": self.output_dim,
            "candidates": self.candidates,
            "tolerance": self.tolerance,
            "stage1_cube": [self.stage1_cube.cube_size, self.stage1_cube.stride],
            "stage2_cube": [self.stage2_cube.cube_size, self.stage2_cube.stride],
            "rank_weighted": self.rank_weighted,
            "max_fit_samples": self.max_fit_samples,
            "recall_values": list(self.recall_values),
            "tolerance_values": list(self.tolerance_values),
            "pr_tolerances": list(self.pr_tolerances),
            "pca_dims": list(self.pca_dims),
        }


def stage_path(entry: ManifestEntry, stage: int):
    if stage == 1:
        return entry.stage1_path
    if stage == 2:
        return entry.stage2_path
    raise ValueError(f"stage must be 1 or 2, got {stage}")


def descriptor_for_grid(grid: FeatureGrid, spec: CubeSpec) -> CubeVectorSet:
    """Canonical descriptor path: normalize per location, then cut cubes."""
    return extract_cubes(normalize_grid(grid), spec)


def fit_stage_model(
    manifest: DatasetManifest,
    stage: int,
    spec: CubeSpec,
    output_dim: int,
    max_fit_samples: int | None = None,
) -> PcaModel:
    """Fit the PCA model for one stage over every image in the manifest."""
    if not manifest.entries:
        raise ValueError("manifest has no entries")
    acc: PcaFitAccumulator | None = None
    for entry in manifest:
        cubes = descriptor_for_grid(read_grid(stage_path(entry, stage)), spec)
        if acc is None:
            acc = PcaFitAccumulator(cubes.dim, max_samples=max_fit_samples)
        acc.add(cubes.vectors)
    assert acc is not None
    return acc.finalize(output_dim)


def build_reference_databases(
    manifest: DatasetManifest,
    stage1_model: PcaModel,
    stage2_model: PcaModel,
    config: PipelineConfig,
) -> tuple[ImageFilterDb, SpatialMatchDb]:
    """Project every reference image and assemble both databases."""
    stage1_sets: list[tuple[int, CubeVectorSet]] = []
    stage2_sets: list[tuple[int, CubeVectorSet]] = []
    for entry in manifest:
        cubes1 = descriptor_for_grid(read_grid(entry.stage1_path), config.stage1_cube)
        stage1_sets.append((entry.frame_id, project_cube_set(stage1_model, cubes1)))
        cubes2 = descriptor_for_grid(read_grid(entry.stage2_path), config.stage2_cube)
        stage2_sets.append((entry.frame_id, project_cube_set(stage2_model, cubes2)))
    return build_image_filter_db(stage1_sets), build_spatial_match_db(stage2_sets)


def prepare_query(
    stage1_model: PcaModel,
    stage2_model: PcaModel,
    grid1: FeatureGrid,
    grid2: FeatureGrid,
    config: PipelineConfig,
) -> tuple[CubeVectorSet, np.ndarray]:
    """Turn a query's two grids into stage-1 vectors and a stage-2 lattice."""
    cubes1 = project_cube_set(
        stage1_model, descriptor_for_grid(grid1, config.stage1_cube)
    )
    cubes2 = project_cube_set(
        stage2_model, descriptor_for_grid(grid2, config.stage2_cube)
    )
    return cubes1, cube_set_to_grid(cubes2)


def query_databases(
    filter_db: ImageFilterDb,
    spatial_db: SpatialMatchDb,
    query_cubes: CubeVectorSet,
    query_grid: np.ndarray,
    config: PipelineConfig,
) -> tuple[CandidateList, MatchResult]:
    """Run both stages for one prepared query."""
    candidates = filter_stage(
        filter_db, query_cubes, config.candidates, config.rank_weighted
    )
    result = spatial_stage(spatial_db, query_grid, candidates)
    return candidates, result


def slice_model(model: PcaModel, output_dim: int) -> PcaModel:
    """Restrict a model to its leading components.

    Valid because components are ordered by captured variance: the d-dim
    model's projection is exactly the first d coordinates of the full one.
    """
    if not (1 <= output_dim <= model.output_dim):
        raise ValueError(
            f"output_dim must be in [1, {model.output_dim}], got {output_dim}"
        )
    variances = None if model.variances is None else model.variances[:output_dim]
    return PcaModel(
        mean=model.mean, basis=model.basis[:output_dim], variances=variances
    )
