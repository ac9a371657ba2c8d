"""Cube descriptors: local normalization, cube extraction and PCA compression.

A feature grid is first L2-normalized per spatial location across the depth
axis, then cut into overlapping k x k x D cubes whose flattened contents are
the raw descriptors. PCA (fit on reference descriptors) maps these to a
compact dimension; Euclidean distances in that space drive both recognition
stages.

All PCA arithmetic is float64 and fully deterministic: fitting the same
samples yields the same model bytes on any run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor_io import (
    BadMagicError,
    FeatureGrid,
    FormatError,
    PayloadSizeError,
    TruncatedPayloadError,
)

PCA_MAGIC = b"PCA1"

# Eigenvalues below this fraction of the largest are treated as zero rank.
_RANK_TOL = 1e-10
# Streaming covariance is quadratic in input dim; above this the accumulator
# falls back to keeping raw samples and using the Gram matrix instead.
_COV_ACCUM_MAX_DIM = 5000
# Block sizes choose roughly 128 MiB float64 temporaries.
_BLOCK_ELEMENTS = 1 << 24


@dataclass(frozen=True)
class CubeSpec:
    """Cube side length and lattice stride, in grid cells."""

    cube_size: int
    stride: int

    def __post_init__(self) -> None:
        if self.cube_size < 1:
            raise ValueError(f"cube_size must be >= 1, got {self.cube_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    def count_along(self, side: int) -> int:
        """Number of cube origins along an axis of length `side`."""
        if side < self.cube_size:
            raise ValueError(
                f"axis of length {side} cannot fit a cube of size {self.cube_size}"
            )
        return (side - self.cube_size) // self.stride + 1


@dataclass
class CubeVectorSet:
    """Cube descriptors for one image: origin positions plus one row each.

    `positions` is (n, 2) int64 holding (row, col) cube origins in
    lexicographic order; `vectors` is (n, dim) with matching rows.
    """

    positions: np.ndarray
    vectors: np.ndarray

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=np.int64)
        vec = np.asarray(self.vectors)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValueError(f"positions must be (n, 2), got {pos.shape}")
        if vec.ndim != 2:
            raise ValueError(f"vectors must be 2-dimensional, got shape {vec.shape}")
        if pos.shape[0] != vec.shape[0]:
            raise ValueError(
                f"{pos.shape[0]} positions but {vec.shape[0]} vectors"
            )
        self.positions = pos
        self.vectors = vec

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def normalize_grid(grid: FeatureGrid) -> FeatureGrid:
    """L2-normalize each (row, col) location across the depth axis.

    After this every location's depth vector has unit norm, except
    all-zero locations which stay all-zero.
    """
    data = grid.data.astype(np.float64)
    norms = np.sqrt((data * data).sum(axis=2, keepdims=True))
    np.divide(data, norms, out=data, where=norms > 0.0)
    return FeatureGrid(data.astype(np.float32))


def extract_cubes(grid: FeatureGrid, spec: CubeSpec) -> CubeVectorSet:
    """Cut `grid` into cubes on the stride lattice and flatten each one.

    Origins run over rows then columns (lexicographic); each vector is the
    cube's values flattened row-major as (row, col, feature), giving
    k*k*D components.
    """
    k, s = spec.cube_size, spec.stride
    n_rows = spec.count_along(grid.height)
    n_cols = spec.count_along(grid.width)
    windows = np.lib.stride_tricks.sliding_window_view(grid.data, (k, k), axis=(0, 1))
    # windows: (H-k+1, W-k+1, D, k, k) -> strided origins, cube axes first.
    strided = windows[::s, ::s]
    vectors = strided.transpose(0, 1, 3, 4, 2).reshape(n_rows * n_cols, k * k * grid.depth)
    rows, cols = np.meshgrid(
        np.arange(0, n_rows * s, s, dtype=np.int64),
        np.arange(0, n_cols * s, s, dtype=np.int64),
        indexing="ij",
    )
    positions = np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)
    return CubeVectorSet(positions, np.ascontiguousarray(vectors))


@dataclass
class PcaModel:
    """Affine projection x -> basis @ (x - mean) with orthonormal rows.

    `mean` is (input_dim,) float64, `basis` is (output_dim, input_dim)
    float64 with rows orthonormal to 1e-5. `variances` holds the sample
    variance captured by each row (descending); it is produced at fit time
    and not persisted, so models read back from disk carry None.
    """

    mean: np.ndarray
    basis: np.ndarray
    variances: np.ndarray | None = None

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        basis = np.asarray(self.basis, dtype=np.float64)
        if mean.ndim != 1 or basis.ndim != 2:
            raise ValueError("mean must be 1-dimensional and basis 2-dimensional")
        if basis.shape[1] != mean.shape[0]:
            raise ValueError(
                f"basis width {basis.shape[1]} does not match mean length {mean.shape[0]}"
            )
        if basis.shape[0] > basis.shape[1]:
            raise ValueError("output dimension exceeds input dimension")
        if self.variances is not None:
            variances = np.asarray(self.variances, dtype=np.float64)
            if variances.shape != (basis.shape[0],):
                raise ValueError("variances must have one entry per basis row")
            self.variances = variances
        gram = basis @ basis.T
        if np.abs(gram - np.eye(basis.shape[0])).max() > 1e-5:
            raise ValueError("basis rows are not orthonormal within 1e-5")
        self.mean = mean
        self.basis = basis

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[0]


def project(model: PcaModel, vector: np.ndarray) -> np.ndarray:
    """Project one vector; returns (output_dim,) float64."""
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    if v.shape[0] != model.input_dim:
        raise ValueError(f"vector has {v.shape[0]} components, model wants {model.input_dim}")
    return model.basis @ (v - model.mean)


def project_many(model: PcaModel, vectors: np.ndarray) -> np.ndarray:
    """Project row vectors; returns (n, output_dim) float64."""
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != model.input_dim:
        raise ValueError(f"expected (n, {model.input_dim}) matrix, got {mat.shape}")
    return (mat - model.mean) @ model.basis.T


def project_cube_set(model: PcaModel, cubes: CubeVectorSet) -> CubeVectorSet:
    """Project every cube vector, keeping positions."""
    return CubeVectorSet(cubes.positions, project_many(model, cubes.vectors))


def _orient_rows(basis: np.ndarray) -> np.ndarray:
    """Fix each row's sign so its largest-magnitude coordinate is positive.

    Ties on magnitude go to the lowest coordinate index, so the convention
    is deterministic.
    """
    idx = np.abs(basis).argmax(axis=1)
    signs = np.sign(basis[np.arange(basis.shape[0]), idx])
    signs[signs == 0] = 1.0
    return basis * signs[:, None]


def _complete_basis(rows: list[np.ndarray], dim: int, need: int) -> list[np.ndarray]:
    """Extend orthonormal `rows` with `need` more rows via Gram-Schmidt
    against the standard basis, scanning coordinates in order."""
    added = 0
    for j in range(dim):
        if added == need:
            break
        v = np.zeros(dim)
        v[j] = 1.0
        for r in rows:
            v -= (r @ v) * r
        norm = np.linalg.norm(v)
        if norm > 0.5:
            rows.append(v / norm)
            added += 1
    if added < need:
        raise ValueError("could not complete an orthonormal basis")
    return rows


def _polish(basis: np.ndarray) -> np.ndarray:
    """Re-orthonormalize nearly orthonormal rows via QR, preserving span
    and row order, then apply the sign convention."""
    q, r = np.linalg.qr(basis.T)
    q = q[:, : basis.shape[0]]
    # qr can flip directions; undo so each polished row still points the
    # way the input row did, then normalize signs.
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return _orient_rows(q.T * signs[:, None])


def _finish_model(
    mean: np.ndarray,
    top_rows: np.ndarray,
    top_variances: np.ndarray,
    output_dim: int,
) -> PcaModel:
    dim = mean.shape[0]
    rank = top_rows.shape[0]
    variances = np.zeros(output_dim)
    variances[:rank] = top_variances
    rows = _polish(top_rows) if rank else np.zeros((0, dim))
    if rank < output_dim:
        completed = _complete_basis([r for r in rows], dim, output_dim - rank)
        rows = np.asarray(completed)
    return PcaModel(mean=mean, basis=np.ascontiguousarray(rows), variances=variances)


def _row_blocks(n: int, dim: int) -> int:
    return max(1, _BLOCK_ELEMENTS // max(dim, 1))


def _fit_from_moments(
    mean: np.ndarray, second_moment: np.ndarray, count: int, output_dim: int
) -> PcaModel:
    """Finish a fit from streamed moments: mean and the raw sum of outer
    products. Only valid when count > 1."""
    dim = mean.shape[0]
    centered = second_moment - count * np.outer(mean, mean)
    cov = (centered + centered.T) / (2.0 * (count - 1))
    evals, evecs = np.linalg.eigh(cov)
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    evals = np.clip(evals, 0.0, None)
    _check_total_variance(evals.sum(), mean, dim)
    rank = int((evals > evals[0] * _RANK_TOL).sum()) if evals[0] > 0 else 0
    keep = min(output_dim, rank)
    return _finish_model(mean, evecs[:, :keep].T, evals[:keep], output_dim)


def _check_total_variance(total: float, mean: np.ndarray, dim: int) -> None:
    scale = max(1.0, float(np.abs(mean).max()))
    if total <= dim * (1e-9 * scale) ** 2:
        raise ValueError("samples have zero variance; nothing to fit")


def _column_block_mean(samples: np.ndarray, block: int) -> np.ndarray:
    dim = samples.shape[1]
    mean = np.empty(dim)
    for start in range(0, dim, block):
        mean[start : start + block] = samples[:, start : start + block].astype(
            np.float64
        ).mean(axis=0)
    return mean


def _fit_gram(samples: np.ndarray, output_dim: int) -> PcaModel:
    """Gram-matrix route for n < dim: eigendecompose the n x n matrix of
    centered inner products and map eigenvectors back to input space.
    Column-blocked so the float64 temporaries stay bounded."""
    n, dim = samples.shape
    block = max(1, _BLOCK_ELEMENTS // n)
    mean = _column_block_mean(samples, block)
    gram = np.zeros((n, n))
    for start in range(0, dim, block):
        part = samples[:, start : start + block].astype(np.float64)
        part -= mean[start : start + block]
        gram += part @ part.T
    gram = (gram + gram.T) / 2.0
    evals, evecs = np.linalg.eigh(gram)
    evals = np.clip(evals[::-1], 0.0, None)
    evecs = evecs[:, ::-1]
    _check_total_variance(evals.sum() / (n - 1), mean, dim)
    rank = int((evals > evals[0] * _RANK_TOL).sum()) if evals[0] > 0 else 0
    keep = min(output_dim, rank)
    weights = evecs[:, :keep] / np.sqrt(evals[:keep])
    rows = np.zeros((keep, dim))
    for start in range(0, dim, block):
        part = samples[:, start : start + block].astype(np.float64)
        part -= mean[start : start + block]
        rows[:, start : start + block] = weights.T @ part
    return _finish_model(mean, rows, evals[:keep] / (n - 1), output_dim)


def _fit_covariance(samples: np.ndarray, output_dim: int) -> PcaModel:
    """Covariance route for dim <= n, row-blocked two-pass accumulation."""
    n, dim = samples.shape
    block = _row_blocks(n, dim)
    mean = np.zeros(dim)
    for start in range(0, n, block):
        mean += samples[start : start + block].astype(np.float64).sum(axis=0)
    mean /= n
    second = np.zeros((dim, dim))
    for start in range(0, n, block):
        part = samples[start : start + block].astype(np.float64)
        part -= mean
        second += part.T @ part
    cov = (second + second.T) / (2.0 * (n - 1))
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[::-1], 0.0, None)
    evecs = evecs[:, ::-1]
    _check_total_variance(evals.sum(), mean, dim)
    rank = int((evals > evals[0] * _RANK_TOL).sum()) if evals[0] > 0 else 0
    keep = min(output_dim, rank)
    return _finish_model(mean, evecs[:, :keep].T, evals[:keep], output_dim)


def fit_pca(samples: np.ndarray, output_dim: int) -> PcaModel:
    """Fit a PCA model on row-vector `samples`.

    Requires output_dim <= min(input_dim, n_samples) and at least 2
    samples with nonzero variance. Components are ordered by decreasing
    captured variance; when the data rank falls short of `output_dim` the
    basis is completed with deterministic orthonormal filler rows whose
    variance is reported as zero.
    """
    mat = np.asarray(samples)
    if mat.ndim != 2:
        raise ValueError(f"samples must be a 2-dimensional array, got shape {mat.shape}")
    n, dim = mat.shape
    if n < 2:
        raise ValueError("need at least 2 samples to fit")
    if not (1 <= output_dim <= min(dim, n)):
        raise ValueError(
            f"output_dim must be in [1, min(input_dim={dim}, samples={n})], got {output_dim}"
        )
    if not np.isfinite(mat).all():
        raise ValueError("samples contain non-finite values")
    if n < dim:
        return _fit_gram(mat, output_dim)
    return _fit_covariance(mat, output_dim)


class PcaFitAccumulator:
    """Incremental PCA fit over batches of descriptor rows.

    For moderate input dims the accumulator streams first and second
    moments, so memory stays O(dim^2) however many rows are added. For
    very wide descriptors it keeps float32 copies of the rows and defers
    to the Gram route, optionally capped at `max_samples` rows (the first
    rows added win, keeping the subset deterministic).
    """

    def __init__(self, input_dim: int, max_samples: int | None = None):
        if input_dim < 1:
            raise ValueError("input_dim must be positive")
        if max_samples is not None and max_samples < 2:
            raise ValueError("max_samples must be at least 2")
        self.input_dim = input_dim
        self.max_samples = max_samples
        self.count = 0
        self._streaming = input_dim <= _COV_ACCUM_MAX_DIM
        if self._streaming:
            self._sum = np.zeros(input_dim)
            self._outer = np.zeros((input_dim, input_dim))
        else:
            self._rows: list[np.ndarray] = []
            self._kept = 0

    def add(self, rows: np.ndarray) -> None:
        mat = np.asarray(rows)
        if mat.ndim != 2 or mat.shape[1] != self.input_dim:
            raise ValueError(f"expected (n, {self.input_dim}) rows, got {mat.shape}")
        if not np.isfinite(mat).all():
            raise ValueError("rows contain non-finite values")
        if mat.shape[0] == 0:
            return
        self.count += mat.shape[0]
        if self._streaming:
            mat64 = mat.astype(np.float64, copy=False)
            self._sum += mat64.sum(axis=0)
            self._outer += mat64.T @ mat64
        else:
            if self.max_samples is not None:
                room = self.max_samples - self._kept
                if room <= 0:
                    return
                mat = mat[:room]
            self._rows.append(mat.astype(np.float32))
            self._kept += mat.shape[0]

    def finalize(self, output_dim: int) -> PcaModel:
        if self.count < 2:
            raise ValueError("need at least 2 samples to fit")
        if self._streaming:
            if not (1 <= output_dim <= min(self.input_dim, self.count)):
                raise ValueError(
                    f"output_dim must be in [1, min(input_dim={self.input_dim}, "
                    f"samples={self.count})], got {output_dim}"
                )
            mean = self._sum / self.count
            return _fit_from_moments(mean, self._outer, self.count, output_dim)
        stacked = np.vstack(self._rows)
        return fit_pca(stacked, output_dim)


def save_pca_model(model: PcaModel, destination: str | Path) -> None:
    """Serialize: magic `PCA1`, u32 input/output dims, then the float64
    mean and basis rows, all little-endian. Byte-exact across runs."""
    with open(destination, "wb") as fh:
        fh.write(PCA_MAGIC)
        fh.write(np.array([model.input_dim, model.output_dim], dtype="<u4").tobytes())
        fh.write(model.mean.astype("<f8", copy=False).tobytes())
        fh.write(model.basis.astype("<f8", copy=False).tobytes())


def load_pca_model(source: str | Path) -> PcaModel:
    with open(source, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(PCA_MAGIC) or raw[: len(PCA_MAGIC)] != PCA_MAGIC:
        raise BadMagicError(f"{source}: expected magic {PCA_MAGIC!r}")
    if len(raw) < len(PCA_MAGIC) + 8:
        raise TruncatedPayloadError(f"{source}: truncated header")
    dims = np.frombuffer(raw, dtype="<u4", count=2, offset=len(PCA_MAGIC))
    input_dim, output_dim = int(dims[0]), int(dims[1])
    if input_dim < 1 or output_dim < 1:
        raise FormatError(f"{source}: non-positive dimensions in header")
    offset = len(PCA_MAGIC) + 8
    expected = (input_dim + output_dim * input_dim) * 8
    payload = raw[offset:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{source}: payload shorter than header declares")
    if len(payload) > expected:
        raise PayloadSizeError(f"{source}: trailing bytes after declared payload")
    floats = np.frombuffer(payload, dtype="<f8")
    mean = floats[:input_dim]
    basis = floats[input_dim:].reshape(output_dim, input_dim)
    return PcaModel(mean=mean.copy(), basis=basis.copy())
