"""Stage 2: spatial consistency scoring of stage-1 candidates.

Every reference image keeps its G x G lattice of compressed cube vectors
with positions. For a candidate/query pair, each candidate vector's single
best match among the query vectors (global argmin of Euclidean distance,
ties to the lexicographically smallest query position) anchors a scan along
its row and column; every probe whose candidate vector maps to the
correspondingly shifted query position scores one point. The candidate with
the highest accumulated score wins.

The scan has a useful closed form. A probe at (i, j+n) with anchor (k, l)
succeeds iff best(i, j+n) == (k, l+n), i.e. iff the probe's best match sits
in row k with column offset equal to its own column offset. Grouping row i
by the pair (best_row, best_col - col) therefore collects exactly the
positions that score against each other, contributing size^2 hits per group
(each member is also an anchor whose scan the others satisfy, self-probe
included). Off-grid targets can never equal an in-grid best match, so they
drop out on their own. Columns are symmetric with (best_col, best_row - row).
This keeps scoring at one distance matrix plus two group-by passes while
staying exactly equal to the literal anchor-by-anchor scan.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .descriptor import CubeVectorSet
from .filtering import CandidateList
from .tensor_io import (
    BadMagicError,
    FormatError,
    PayloadSizeError,
    TruncatedPayloadError,
)

SMDB_MAGIC = b"SMD1"

_MAX_FRAME_ID = 2**32 - 1


def max_score(grid_side: int) -> int:
    """Highest achievable match score: G^2 anchors x 2G probes each."""
    return grid_side * grid_side * 2 * grid_side


def cube_set_to_grid(cubes: CubeVectorSet) -> np.ndarray:
    """Arrange a cube set into a (G, G, d) float32 lattice array.

    The positions must form a complete square lattice with one uniform
    stride, as produced by cube extraction on a square grid.
    """
    n = len(cubes)
    side = int(round(n**0.5))
    if side * side != n:
        raise ValueError(f"{n} cube vectors do not form a square lattice")
    rows = np.unique(cubes.positions[:, 0])
    cols = np.unique(cubes.positions[:, 1])
    if rows.shape[0] != side or cols.shape[0] != side or not np.array_equal(rows, cols):
        raise ValueError("cube positions do not form a square lattice")
    expect_r, expect_c = np.meshgrid(rows, cols, indexing="ij")
    expected = np.stack([expect_r.reshape(-1), expect_c.reshape(-1)], axis=1)
    if not np.array_equal(cubes.positions, expected):
        raise ValueError("cube positions are not in lexicographic lattice order")
    return np.ascontiguousarray(
        cubes.vectors.reshape(side, side, cubes.dim), dtype=np.float32
    )


@dataclass
class SpatialMatchDb:
    """Per-frame (G, G, d) vector lattices for stage-2 scoring."""

    frames: np.ndarray
    grids: np.ndarray
    _index: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.int64)
        grids = np.asarray(self.grids, dtype=np.float32)
        if frames.ndim != 1 or grids.ndim != 4:
            raise ValueError("frames must be (n,) and grids (n, G, G, d)")
        if frames.shape[0] != grids.shape[0]:
            raise ValueError("frames and grids disagree on image count")
        if frames.shape[0] < 1:
            raise ValueError("database needs at least one image")
        if grids.shape[1] != grids.shape[2]:
            raise ValueError(f"grids must be square, got {grids.shape[1]}x{grids.shape[2]}")
        self.frames = frames
        self.grids = grids
        self._index = {int(f): i for i, f in enumerate(frames)}
        if len(self._index) != frames.shape[0]:
            raise ValueError("duplicate frame ids")

    @property
    def image_count(self) -> int:
        return self.frames.shape[0]

    @property
    def grid_side(self) -> int:
        return self.grids.shape[1]

    @property
    def dim(self) -> int:
        return self.grids.shape[3]

    def grid_for(self, frame_id: int) -> np.ndarray:
        if frame_id not in self._index:
            raise ValueError(f"frame {frame_id} not in spatial database")
        return self.grids[self._index[frame_id]]


def build_spatial_match_db(
    reference: Sequence[tuple[int, CubeVectorSet]],
) -> SpatialMatchDb:
    """Assemble the stage-2 database from per-image projected cube sets."""
    if not reference:
        raise ValueError("reference list is empty")
    frames = []
    grids = []
    for frame_id, cubes in reference:
        if not (0 <= frame_id <= _MAX_FRAME_ID):
            raise ValueError(f"frame_id {frame_id} out of range for storage")
        frames.append(frame_id)
        grids.append(cube_set_to_grid(cubes))
    stacked = np.stack(grids)
    return SpatialMatchDb(frames=np.asarray(frames, dtype=np.int64), grids=stacked)


@dataclass
class MatchResult:
    """Final stage-2 decision over one candidate list."""

    best_frame: int
    score: int
    confidence: float
    ranked: list[tuple[int, int]]


def _best_match_table(candidate: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Flat argmin-over-query index of each candidate vector's best match.

    Distances are squared Euclidean in float64; np.argmin takes the first
    minimum, which on row-major flattening is the lexicographically
    smallest query position.
    """
    side = candidate.shape[0]
    dim = candidate.shape[2]
    c = candidate.reshape(side * side, dim).astype(np.float64)
    q = query.reshape(side * side, dim).astype(np.float64)
    diff = c[:, None, :] - q[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    return d2.argmin(axis=1)


def _alignment_hits(group_ids: np.ndarray, offsets: np.ndarray, side: int) -> int:
    """Sum of squared group sizes over (lane, target lane, offset) classes.

    `group_ids` combines the scan lane with the best-match lane; `offsets`
    is the difference between best-match position and own position along
    the scan direction, which is shared exactly by mutually matching
    probes.
    """
    codes = group_ids * (2 * side - 1) + (offsets + side - 1)
    _, counts = np.unique(codes, return_counts=True)
    return int((counts * counts).sum())


def match_score(candidate: np.ndarray, query: np.ndarray) -> int:
    """Spatial consistency score between two (G, G, d) vector lattices."""
    cand = np.asarray(candidate)
    qry = np.asarray(query)
    if cand.ndim != 3 or cand.shape[0] != cand.shape[1]:
        raise ValueError(f"candidate must be (G, G, d), got {cand.shape}")
    if cand.shape != qry.shape:
        raise ValueError(f"grid shapes differ: {cand.shape} vs {qry.shape}")
    side = cand.shape[0]
    bm = _best_match_table(cand, qry)
    bm_row = (bm // side).reshape(side, side)
    bm_col = (bm % side).reshape(side, side)
    own_row, own_col = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    row_hits = _alignment_hits(
        (own_row * side + bm_row).reshape(-1),
        (bm_col - own_col).reshape(-1),
        side,
    )
    col_hits = _alignment_hits(
        (own_col * side + bm_col).reshape(-1),
        (bm_row - own_row).reshape(-1),
        side,
    )
    return row_hits + col_hits


def spatial_stage(
    db: SpatialMatchDb, query_grid: np.ndarray, candidates: CandidateList
) -> MatchResult:
    """Score every stage-1 candidate against the query and pick the best.

    Ties go to the higher stage-1 vote_score, then the lower frame_id. The
    confidence is score / max_score(G).
    """
    if not candidates.entries:
        raise ValueError("candidate list is empty")
    scored: list[tuple[int, int, float]] = []
    for frame_id, votes in candidates.entries:
        grid = db.grid_for(frame_id)
        scored.append((frame_id, match_score(grid, query_grid), votes))
    scored.sort(key=lambda item: (-item[1], -item[2], item[0]))
    best_frame, best_score, _ = scored[0]
    return MatchResult(
        best_frame=best_frame,
        score=best_score,
        confidence=best_score / max_score(db.grid_side),
        ranked=[(frame, score) for frame, score, _ in scored],
    )


def save_spatial_match_db(db: SpatialMatchDb, destination: str | Path) -> None:
    """Write `SMD1` magic, u32 image_count, u32 G, u32 dim, then per image
    a u32 frame_id followed by G*G row-major vectors of dim float32."""
    side, dim = db.grid_side, db.dim
    record = np.dtype([("frame", "<u4"), ("grid", "<f4", (side, side, dim))])
    packed = np.empty(db.image_count, dtype=record)
    packed["frame"] = db.frames
    packed["grid"] = db.grids
    with open(destination, "wb") as fh:
        fh.write(SMDB_MAGIC)
        fh.write(np.array([db.image_count, side, dim], dtype="<u4").tobytes())
        fh.write(packed.tobytes())


def load_spatial_match_db(source: str | Path) -> SpatialMatchDb:
    with open(source, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(SMDB_MAGIC) or raw[: len(SMDB_MAGIC)] != SMDB_MAGIC:
        raise BadMagicError(f"{source}: expected magic {SMDB_MAGIC!r}")
    if len(raw) < len(SMDB_MAGIC) + 12:
        raise TruncatedPayloadError(f"{source}: truncated header")
    header = np.frombuffer(raw, dtype="<u4", count=3, offset=len(SMDB_MAGIC))
    image_count, side, dim = (int(v) for v in header)
    if min(image_count, side, dim) < 1:
        raise FormatError(f"{source}: non-positive header fields")
    record = np.dtype([("frame", "<u4"), ("grid", "<f4", (side, side, dim))])
    expected = image_count * record.itemsize
    payload = raw[len(SMDB_MAGIC) + 12 :]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{source}: payload shorter than header declares")
    if len(payload) > expected:
        raise PayloadSizeError(f"{source}: trailing bytes after declared payload")
    packed = np.frombuffer(payload, dtype=record)
    return SpatialMatchDb(
        frames=packed["frame"].astype(np.int64),
        grids=np.ascontiguousarray(packed["grid"]),
    )
