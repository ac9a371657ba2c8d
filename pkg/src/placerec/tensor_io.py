"""Portable storage for feature grids, dataset manifests and ground truth.

The `.fgt` tensor format is the interchange boundary between the feature
extractor and the recognition engine, so its byte layout is fixed:
little-endian on every host, 32-bit floats, row-major (row, col, feature).
Manifests and ground truth are plain comma-separated text so that small
datasets stay human-editable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GRID_MAGIC = b"FGT1"
_GRID_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Malformed on-disk data (any of the binary or text formats)."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(FormatError):
    """File ends before the payload its header declares."""


class PayloadSizeError(FormatError):
    """Payload length disagrees with the header (trailing bytes present)."""


class ManifestError(FormatError):
    """Bad manifest or ground-truth line; message carries the line number."""


@dataclass(eq=False)
class FeatureGrid:
    """H x W x D activation tensor for one image and one layer.

    `data` is coerced to a C-contiguous float32 array of shape (H, W, D).
    All values must be finite.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"grid must be 3-dimensional, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"grid dimensions must be positive, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise ValueError("grid contains non-finite values")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]

    @property
    def values(self) -> np.ndarray:
        """Flat row-major (row, col, feature) view of the activations."""
        return self.data.reshape(-1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(
            np.array_equal(self.data, other.data)
        )


def write_grid(grid: FeatureGrid, destination: str | Path) -> None:
    """Write `grid` to `destination` in the `.fgt` format.

    Layout: magic `FGT1`, then H, W, D as little-endian u32, then H*W*D
    little-endian float32 values in row-major order. The output is
    byte-for-byte deterministic. Non-finite values are rejected before
    anything is written.
    """
    data = np.ascontiguousarray(grid.data, dtype=np.float32)
    if not np.isfinite(data).all():
        raise ValueError("refusing to write grid with non-finite values")
    h, w, d = data.shape
    header = _GRID_HEADER.pack(GRID_MAGIC, h, w, d)
    with open(destination, "wb") as fh:
        fh.write(header)
        fh.write(data.astype("<f4", copy=False).tobytes())


def read_grid(source: str | Path) -> FeatureGrid:
    """Read a `.fgt` file written by `write_grid`.

    Raises BadMagicError, TruncatedPayloadError or PayloadSizeError for the
    corresponding corruptions; the round trip through `write_grid` is
    bit-exact.
    """
    with open(source, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(GRID_MAGIC):
        raise TruncatedPayloadError(f"{source}: file shorter than the magic prefix")
    if raw[: len(GRID_MAGIC)] != GRID_MAGIC:
        raise BadMagicError(f"{source}: expected magic {GRID_MAGIC!r}")
    if len(raw) < _GRID_HEADER.size:
        raise TruncatedPayloadError(f"{source}: truncated header")
    _, h, w, d = _GRID_HEADER.unpack_from(raw)
    if min(h, w, d) < 1:
        raise FormatError(f"{source}: header declares non-positive dimensions {(h, w, d)}")
    expected = h * w * d * 4
    payload = raw[_GRID_HEADER.size :]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{source}: payload has {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise PayloadSizeError(
            f"{source}: {len(payload) - expected} trailing bytes after declared payload"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, d)
    if not np.isfinite(values).all():
        raise FormatError(f"{source}: payload contains non-finite values")
    return FeatureGrid(values.copy())


@dataclass(frozen=True)
class ManifestEntry:
    frame_id: int
    stage1_path: Path
    stage2_path: Path


@dataclass
class DatasetManifest:
    """Ordered frame list for one traverse; order drives downstream indexing."""

    name: str
    entries: list[ManifestEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def frame_ids(self) -> list[int]:
        return [e.frame_id for e in self.entries]


@dataclass
class GroundTruth:
    """Query-frame to reference-frame correspondence."""

    pairs: list[tuple[int, int]]
    by_query: dict[int, int] = field(init=False)

    def __post_init__(self) -> None:
        by_query: dict[int, int] = {}
        for query, reference in self.pairs:
            if query in by_query:
                raise ValueError(f"query frame {query} appears more than once")
            by_query[query] = reference
        self.by_query = by_query

    def reference_for(self, query_frame: int) -> int:
        if query_frame not in self.by_query:
            raise ValueError(f"query frame {query_frame} missing from ground truth")
        return self.by_query[query_frame]


def _data_lines(path: Path) -> Iterable[tuple[int, str]]:
    """Yield (1-based line number, stripped content) for non-comment lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest CSV: `frame_id,stage1_path,stage2_path` per line.

    `#` comment lines and blank lines are skipped. Relative paths are
    resolved against the manifest's own directory. Frame ids must be
    strictly increasing and all paths distinct.
    """
    path = Path(path)
    base = path.parent
    entries: list[ManifestEntry] = []
    seen_paths: set[Path] = set()
    last_frame: int | None = None
    for lineno, line in _data_lines(path):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 comma-separated fields")
        try:
            frame_id = int(parts[0])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: frame_id {parts[0]!r} is not an integer") from None
        if frame_id < 0:
            raise ManifestError(f"{path}:{lineno}: frame_id must be nonnegative")
        if last_frame is not None and frame_id <= last_frame:
            if frame_id == last_frame or any(e.frame_id == frame_id for e in entries):
                raise ManifestError(f"{path}:{lineno}: duplicate frame_id {frame_id}")
            raise ManifestError(
                f"{path}:{lineno}: frame_id {frame_id} not strictly increasing"
            )
        if not parts[1] or not parts[2]:
            raise ManifestError(f"{path}:{lineno}: empty grid path")
        p1 = (base / parts[1]).resolve()
        p2 = (base / parts[2]).resolve()
        for p in (p1, p2):
            if p in seen_paths:
                raise ManifestError(f"{path}:{lineno}: duplicate grid path {p}")
            seen_paths.add(p)
        entries.append(ManifestEntry(frame_id, p1, p2))
        last_frame = frame_id
    return DatasetManifest(name=path.stem, entries=entries)


def load_ground_truth(path: str | Path) -> GroundTruth:
    """Parse a ground-truth CSV: `query_frame,reference_frame` per line."""
    path = Path(path)
    pairs: list[tuple[int, int]] = []
    seen: set[int] = set()
    for lineno, line in _data_lines(path):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise ManifestError(f"{path}:{lineno}: expected 2 comma-separated fields")
        try:
            query, reference = int(parts[0]), int(parts[1])
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: frame ids must be integers") from None
        if query in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate query frame {query}")
        seen.add(query)
        pairs.append((query, reference))
    return GroundTruth(pairs)


def write_manifest(
    path: str | Path,
    rows: Sequence[tuple[int, str | Path, str | Path]],
    header_comment: str | None = None,
) -> None:
    """Write manifest rows as CSV. Paths are written exactly as given."""
    path = Path(path)
    lines = []
    if header_comment:
        lines.extend(f"# {c}" for c in header_comment.splitlines())
    lines.extend(f"{fid},{p1},{p2}" for fid, p1, p2 in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_ground_truth(path: str | Path, pairs: Sequence[tuple[int, int]]) -> None:
    Path(path).write_text(
        "\n".join(f"{q},{r}" for q, r in pairs) + "\n", encoding="utf-8"
    )
