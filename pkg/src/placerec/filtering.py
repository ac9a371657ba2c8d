"""Stage 1: candidate retrieval by nearest-neighbor voting.

The image filtering database holds the compressed cube vectors of every
reference image with their owning frame id and nothing else (no positions).
A query's cube vectors each fetch their N nearest records by exact
brute-force scan and vote for the owning frames; the N frames with the
highest bins go on to stage 2.

Search is exact and fully deterministic: distance ties fall back to the
lower record index, candidate ties to smaller summed voting distance and
then lower frame id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .descriptor import CubeVectorSet
from .tensor_io import (
    BadMagicError,
    FormatError,
    PayloadSizeError,
    TruncatedPayloadError,
)

CUBES_PER_IMAGE = 16
IFDB_MAGIC = b"IFD1"

_MAX_FRAME_ID = 2**32 - 1


@dataclass
class ImageFilterDb:
    """Flat record store: `owners[i]` is the frame owning row `vectors[i]`.

    Records keep the build order (16 consecutive rows per image). Vectors
    are float32, mirroring the on-disk format, so a database used in
    memory and one reloaded from disk score identically.
    """

    owners: np.ndarray
    vectors: np.ndarray
    image_count: int
    _vectors64: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        owners = np.asarray(self.owners, dtype=np.int64)
        vectors = np.asarray(self.vectors, dtype=np.float32)
        if owners.ndim != 1 or vectors.ndim != 2:
            raise ValueError("owners must be 1-dimensional and vectors 2-dimensional")
        if owners.shape[0] != vectors.shape[0]:
            raise ValueError("owners and vectors disagree on record count")
        if owners.shape[0] != CUBES_PER_IMAGE * self.image_count:
            raise ValueError(
                f"expected {CUBES_PER_IMAGE} records per image, got "
                f"{owners.shape[0]} for {self.image_count} images"
            )
        self.owners = owners
        self.vectors = vectors

    @property
    def record_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def vectors64(self) -> np.ndarray:
        """Cached float64 view of the records used by the distance scan."""
        if self._vectors64 is None:
            self._vectors64 = self.vectors.astype(np.float64)
        return self._vectors64


@dataclass
class CandidateList:
    """Stage-1 output: (frame_id, vote_score) sorted by descending votes."""

    entries: list[tuple[int, float]]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def frame_ids(self) -> list[int]:
        return [frame for frame, _ in self.entries]


def build_image_filter_db(
    reference: Sequence[tuple[int, CubeVectorSet]],
) -> ImageFilterDb:
    """Assemble the stage-1 database from per-image projected cube sets.

    Every set must hold exactly 16 vectors of one common dimension; records
    keep the input order.
    """
    if not reference:
        raise ValueError("reference list is empty")
    dim: int | None = None
    seen: set[int] = set()
    owner_blocks: list[np.ndarray] = []
    vector_blocks: list[np.ndarray] = []
    for frame_id, cubes in reference:
        if not (0 <= frame_id <= _MAX_FRAME_ID):
            raise ValueError(f"frame_id {frame_id} out of range for storage")
        if frame_id in seen:
            raise ValueError(f"duplicate frame_id {frame_id}")
        seen.add(frame_id)
        if len(cubes) != CUBES_PER_IMAGE:
            raise ValueError(
                f"frame {frame_id}: expected {CUBES_PER_IMAGE} cube vectors, got {len(cubes)}"
            )
        if dim is None:
            dim = cubes.dim
        elif cubes.dim != dim:
            raise ValueError(
                f"frame {frame_id}: vector dim {cubes.dim} != first frame's {dim}"
            )
        owner_blocks.append(np.full(CUBES_PER_IMAGE, frame_id, dtype=np.int64))
        vector_blocks.append(np.asarray(cubes.vectors, dtype=np.float32))
    return ImageFilterDb(
        owners=np.concatenate(owner_blocks),
        vectors=np.vstack(vector_blocks),
        image_count=len(reference),
    )


def _top_indices(d2: np.ndarray, count: int) -> np.ndarray:
    """Indices of the `count` smallest values, ordered by (value, index).

    argpartition alone breaks boundary ties arbitrarily, so indices at the
    threshold value are re-picked in index order.
    """
    n = d2.shape[0]
    if count >= n:
        selected = np.arange(n)
    else:
        part = np.argpartition(d2, count - 1)[:count]
        threshold = d2[part].max()
        below = np.flatnonzero(d2 < threshold)
        at = np.flatnonzero(d2 == threshold)
        selected = np.concatenate([below, at[: count - below.size]])
    order = np.lexsort((selected, d2[selected]))
    return selected[order]


def nearest_records(
    db: ImageFilterDb, query_vector: np.ndarray, count: int
) -> list[tuple[int, float]]:
    """Exact top-`count` scan: (owner_frame, Euclidean distance) ascending.

    Distance ties are resolved toward the lower record index.
    """
    q = np.asarray(query_vector, dtype=np.float64).reshape(-1)
    if q.shape[0] != db.dim:
        raise ValueError(f"query vector has dim {q.shape[0]}, database has {db.dim}")
    if not (1 <= count <= db.record_count):
        raise ValueError(
            f"count must be in [1, {db.record_count}], got {count}"
        )
    diff = db.vectors64 - q
    d2 = (diff * diff).sum(axis=1)
    top = _top_indices(d2, count)
    distances = np.sqrt(d2[top])
    return [(int(db.owners[i]), float(dist)) for i, dist in zip(top, distances)]


def vote_histogram(
    db: ImageFilterDb,
    query: CubeVectorSet,
    count: int,
    rank_weighted: bool = False,
) -> dict[int, tuple[float, float]]:
    """Accumulate votes: frame_id -> (vote_score, summed voting distance).

    Each of the query's 16 vectors contributes one vote per record in its
    top-`count` list (an owner may collect several votes from one query
    vector). With `rank_weighted` the vote at rank r is 1/(r+1) instead
    of 1.
    """
    if len(query) != CUBES_PER_IMAGE:
        raise ValueError(
            f"query must have {CUBES_PER_IMAGE} cube vectors, got {len(query)}"
        )
    bins: dict[int, tuple[float, float]] = {}
    for vector in query.vectors:
        for rank, (owner, distance) in enumerate(nearest_records(db, vector, count)):
            weight = 1.0 / (rank + 1) if rank_weighted else 1.0
            votes, dist_sum = bins.get(owner, (0.0, 0.0))
            bins[owner] = (votes + weight, dist_sum + distance)
    return bins


def filter_stage(
    db: ImageFilterDb,
    query: CubeVectorSet,
    count: int,
    rank_weighted: bool = False,
) -> CandidateList:
    """Run stage 1: return up to `count` frames with the highest vote bins.

    Ordering is by descending vote_score, then ascending summed distance of
    the frame's voting records, then ascending frame_id.
    """
    bins = vote_histogram(db, query, count, rank_weighted)
    ranked = sorted(
        bins.items(), key=lambda item: (-item[1][0], item[1][1], item[0])
    )
    return CandidateList([(frame, votes) for frame, (votes, _) in ranked[:count]])


def save_image_filter_db(db: ImageFilterDb, destination: str | Path) -> None:
    """Write `IFD1` magic, u32 image_count, u32 dim, then interleaved
    (u32 owner_frame, dim float32) records, all little-endian."""
    record = np.dtype([("owner", "<u4"), ("vec", "<f4", (db.dim,))])
    packed = np.empty(db.record_count, dtype=record)
    packed["owner"] = db.owners
    packed["vec"] = db.vectors
    with open(destination, "wb") as fh:
        fh.write(IFDB_MAGIC)
        fh.write(np.array([db.image_count, db.dim], dtype="<u4").tobytes())
        fh.write(packed.tobytes())


def load_image_filter_db(source: str | Path) -> ImageFilterDb:
    with open(source, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(IFDB_MAGIC) or raw[: len(IFDB_MAGIC)] != IFDB_MAGIC:
        raise BadMagicError(f"{source}: expected magic {IFDB_MAGIC!r}")
    if len(raw) < len(IFDB_MAGIC) + 8:
        raise TruncatedPayloadError(f"{source}: truncated header")
    header = np.frombuffer(raw, dtype="<u4", count=2, offset=len(IFDB_MAGIC))
    image_count, dim = int(header[0]), int(header[1])
    if image_count < 1 or dim < 1:
        raise FormatError(f"{source}: non-positive header fields")
    record = np.dtype([("owner", "<u4"), ("vec", "<f4", (dim,))])
    expected = CUBES_PER_IMAGE * image_count * record.itemsize
    payload = raw[len(IFDB_MAGIC) + 8 :]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{source}: payload shorter than header declares")
    if len(payload) > expected:
        raise PayloadSizeError(f"{source}: trailing bytes after declared payload")
    packed = np.frombuffer(payload, dtype=record)
    return ImageFilterDb(
        owners=packed["owner"].astype(np.int64),
        vectors=np.ascontiguousarray(packed["vec"]),
        image_count=image_count,
    )
