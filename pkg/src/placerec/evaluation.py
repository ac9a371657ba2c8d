"""Benchmark harness: tolerance matching, recall tables, PR curves, reports.

A guess counts as correct when its frame id lies within a fixed tolerance
of the ground-truth reference frame. On top of that single rule the module
derives the standard artifacts: accuracy versus tolerance, recall@N over
the stage-1 candidate lists, precision-recall curves swept over the
stage-2 confidence, and their AUC. `run_benchmark` ties the whole pipeline
together and `write_report` emits a JSON report plus CSV tables ready for
plotting.

Reports are byte-identical across repeated runs and thread counts;
per-query latencies, which are inherently noisy, go to a separate CSV and
never into the JSON.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .descriptor import CubeVectorSet
from .filtering import CandidateList, ImageFilterDb, filter_stage
from .pipeline import (
    PipelineConfig,
    build_reference_databases,
    fit_stage_model,
    prepare_query,
    query_databases,
)
from .tensor_io import DatasetManifest, GroundTruth, read_grid


@dataclass(frozen=True)
class ToleranceRule:
    """A guess is correct iff |guess - reference| <= frames."""

    frames: int = 2

    def __post_init__(self) -> None:
        if self.frames < 0:
            raise ValueError("tolerance must be nonnegative")

    def is_match(self, guess: int, reference: int) -> bool:
        return abs(guess - reference) <= self.frames


@dataclass
class PrCurve:
    """Precision-recall points in threshold-descending order, plus AUC."""

    points: list[tuple[float, float]]
    auc: float


def pr_curve(results: Sequence[tuple[bool, float]]) -> PrCurve:
    """Sweep distinct confidence thresholds from high to low.

    At each threshold everything with confidence >= threshold is accepted;
    recall is accepted/total and precision is correct-accepted/accepted.
    The AUC integrates precision over the recall axis, each threshold group
    contributing its recall increment at its precision, so an all-correct
    input yields exactly 1.0.
    """
    if not results:
        raise ValueError("empty result set")
    pairs = [(bool(correct), float(conf)) for correct, conf in results]
    if any(not math.isfinite(conf) for _, conf in pairs):
        raise ValueError("confidences must be finite")
    pairs.sort(key=lambda item: -item[1])
    total = len(pairs)
    points: list[tuple[float, float]] = []
    accepted = correct_accepted = 0
    weighted_hits = 0.0
    i = 0
    while i < total:
        j = i
        threshold = pairs[i][1]
        while j < total and pairs[j][1] == threshold:
            accepted += 1
            correct_accepted += pairs[j][0]
            j += 1
        precision = correct_accepted / accepted
        points.append((accepted / total, precision))
        weighted_hits += (j - i) * precision
        i = j
    return PrCurve(points=points, auc=weighted_hits / total)


def _as_list_items(
    candidate_lists: Mapping[int, CandidateList] | Iterable[tuple[int, CandidateList]],
) -> list[tuple[int, CandidateList]]:
    if isinstance(candidate_lists, Mapping):
        return list(candidate_lists.items())
    return list(candidate_lists)


def recall_at_n(
    candidate_lists: Mapping[int, CandidateList] | Iterable[tuple[int, CandidateList]],
    ground_truth: GroundTruth,
    rule: ToleranceRule,
    n: int,
) -> float:
    """Fraction of queries whose top-n candidates contain a correct frame.

    Every list must have at least n entries; queries must appear in the
    ground truth.
    """
    if n < 1:
        raise ValueError("n must be positive")
    items = _as_list_items(candidate_lists)
    if not items:
        raise ValueError("no candidate lists given")
    hits = 0
    for query, candidates in items:
        if len(candidates) < n:
            raise ValueError(
                f"query {query}: candidate list has {len(candidates)} entries, need {n}"
            )
        reference = ground_truth.reference_for(query)
        hits += any(
            rule.is_match(frame, reference) for frame in candidates.frame_ids[:n]
        )
    return hits / len(items)


def _prefix_recall(
    items: Sequence[tuple[int, CandidateList]],
    ground_truth: GroundTruth,
    rule: ToleranceRule,
    n: int,
) -> float:
    """Like recall_at_n but tolerant of lists shorter than n (a short list
    simply has no further candidates to be right with)."""
    hits = 0
    for query, candidates in items:
        reference = ground_truth.reference_for(query)
        hits += any(
            rule.is_match(frame, reference) for frame in candidates.frame_ids[:n]
        )
    return hits / len(items)


def tolerance_sweep(
    results: Sequence[tuple[int, int]],
    ground_truth: GroundTruth,
    t_values: Sequence[int],
) -> list[tuple[int, float]]:
    """Accuracy of (query_frame, guessed_frame) results at each tolerance.

    t_values must be sorted ascending; the output accuracy is then
    nondecreasing, since each larger tolerance accepts a superset.
    """
    values = [int(t) for t in t_values]
    if values != sorted(values):
        raise ValueError("t_values must be sorted ascending")
    if any(t < 0 for t in values):
        raise ValueError("tolerances must be nonnegative")
    out: list[tuple[int, float]] = []
    for t in values:
        rule = ToleranceRule(t)
        correct = sum(
            rule.is_match(guess, ground_truth.reference_for(query))
            for query, guess in results
        )
        out.append((t, correct / len(results) if results else 0.0))
    return out


@dataclass
class QueryOutcome:
    """One benchmark row; latency stays out of the serialized report."""

    query_frame: int
    guessed_frame: int
    confidence: float
    correct: bool
    vote_score: float
    latency_ms: float


@dataclass
class EvalReport:
    dataset: str
    config: dict
    outcomes: list[QueryOutcome]
    accuracy: float
    recall_table: list[tuple[int, float]]
    tolerance_curve: list[tuple[int, float]]
    pr_curves: dict[int, PrCurve]
    pca_sweep: list[tuple[int, float]]

    def to_json_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "config": self.config,
            "queries": [
                {
                    "query_frame": o.query_frame,
                    "guessed_frame": o.guessed_frame,
                    "confidence": o.confidence,
                    "correct": o.correct,
                    "vote_score": o.vote_score,
                }
                for o in self.outcomes
            ],
            "aggregates": {
                "accuracy": self.accuracy,
                "recall_at_n": {str(n): r for n, r in self.recall_table},
                "tolerance_accuracy": {str(t): a for t, a in self.tolerance_curve},
                "pr_curves": {
                    str(t): {"points": [[r, p] for r, p in c.points], "auc": c.auc}
                    for t, c in self.pr_curves.items()
                },
                "pca_recall": {str(d): r for d, r in self.pca_sweep},
            },
        }


def _wrap_query_error(frame_id: int, exc: Exception) -> Exception:
    message = f"query frame {frame_id}: {exc}"
    try:
        return type(exc)(message)
    except TypeError:
        return RuntimeError(message)


def run_benchmark(
    reference_manifest: DatasetManifest,
    query_manifest: DatasetManifest,
    ground_truth: GroundTruth,
    config: PipelineConfig,
    dataset_name: str | None = None,
) -> EvalReport:
    """Fit models, build databases, run every query, aggregate metrics.

    Fully deterministic for fixed inputs and config: queries may execute
    on a thread pool but results are assembled in manifest order.
    """
    stage1_model = fit_stage_model(
        reference_manifest, 1, config.stage1_cube, config.output_dim,
        config.max_fit_samples,
    )
    stage2_model = fit_stage_model(
        reference_manifest, 2, config.stage2_cube, config.output_dim,
        config.max_fit_samples,
    )
    filter_db, spatial_db = build_reference_databases(
        reference_manifest, stage1_model, stage2_model, config
    )

    def one_query(entry):
        try:
            start = time.perf_counter()
            grid1 = read_grid(entry.stage1_path)
            grid2 = read_grid(entry.stage2_path)
            cubes1, lattice2 = prepare_query(
                stage1_model, stage2_model, grid1, grid2, config
            )
            candidates, result = query_databases(
                filter_db, spatial_db, cubes1, lattice2, config
            )
            latency_ms = (time.perf_counter() - start) * 1000.0
            return cubes1, candidates, result, latency_ms
        except Exception as exc:
            raise _wrap_query_error(entry.frame_id, exc) from exc

    threads = config.effective_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(one_query, query_manifest.entries))
    else:
        raw = [one_query(entry) for entry in query_manifest.entries]

    rule = ToleranceRule(config.tolerance)
    outcomes: list[QueryOutcome] = []
    candidate_lists: list[tuple[int, CandidateList]] = []
    query_cube_vectors: list[np.ndarray] = []
    for entry, (cubes1, candidates, result, latency_ms) in zip(
        query_manifest.entries, raw
    ):
        reference = ground_truth.reference_for(entry.frame_id)
        votes = dict(candidates.entries).get(result.best_frame, 0.0)
        outcomes.append(
            QueryOutcome(
                query_frame=entry.frame_id,
                guessed_frame=result.best_frame,
                confidence=result.confidence,
                correct=rule.is_match(result.best_frame, reference),
                vote_score=votes,
                latency_ms=latency_ms,
            )
        )
        candidate_lists.append((entry.frame_id, candidates))
        query_cube_vectors.append(np.asarray(cubes1.vectors, dtype=np.float32))

    accuracy = sum(o.correct for o in outcomes) / len(outcomes) if outcomes else 0.0
    recall_table = [
        (n, _prefix_recall(candidate_lists, ground_truth, rule, n))
        for n in config.recall_values
        if n <= config.candidates
    ]
    tolerance_curve = tolerance_sweep(
        [(o.query_frame, o.guessed_frame) for o in outcomes],
        ground_truth,
        config.tolerance_values,
    )
    pr_curves = {
        t: pr_curve(
            [
                (
                    ToleranceRule(t).is_match(
                        o.guessed_frame, ground_truth.reference_for(o.query_frame)
                    ),
                    o.confidence,
                )
                for o in outcomes
            ]
        )
        for t in config.pr_tolerances
    }
    pca_sweep = _pca_dimension_sweep(
        filter_db, query_manifest, query_cube_vectors, ground_truth, rule, config
    )
    name = dataset_name or query_manifest.name
    return EvalReport(
        dataset=name,
        config=config.to_dict(),
        outcomes=outcomes,
        accuracy=accuracy,
        recall_table=recall_table,
        tolerance_curve=tolerance_curve,
        pr_curves=pr_curves,
        pca_sweep=pca_sweep,
    )


def _pca_dimension_sweep(
    filter_db,
    query_manifest: DatasetManifest,
    query_cube_vectors: list[np.ndarray],
    ground_truth: GroundTruth,
    rule: ToleranceRule,
    config: PipelineConfig,
) -> list[tuple[int, float]]:
    """Stage-1 recall at reduced PCA dimensions.

    Components are variance-ordered, so the database for dimension d is
    just the leading d columns of the stored vectors; no refit needed.
    Recall is measured at depth 25, or at the candidate budget when that
    is smaller.
    """
    dims = sorted(set(config.pca_dims) | {config.output_dim})
    depth = min(25, config.candidates)
    rows: list[tuple[int, float]] = []
    for dim in dims:
        sliced_db = ImageFilterDb(
            owners=filter_db.owners,
            vectors=filter_db.vectors[:, :dim],
            image_count=filter_db.image_count,
        )
        lists = []
        for entry, vectors in zip(query_manifest.entries, query_cube_vectors):
            cubes = CubeVectorSet(
                positions=np.zeros((vectors.shape[0], 2), dtype=np.int64),
                vectors=vectors[:, :dim],
            )
            lists.append(
                (
                    entry.frame_id,
                    filter_stage(
                        sliced_db, cubes, config.candidates, config.rank_weighted
                    ),
                )
            )
        rows.append((dim, _prefix_recall(lists, ground_truth, rule, depth)))
    return rows


def _csv_lines(header: str, rows: Iterable[Sequence]) -> str:
    lines = [header]
    lines.extend(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir: str | Path) -> Path:
    """Write report.json plus the CSV tables; returns the report path.

    The JSON and metric CSVs are byte-identical across reruns on the same
    inputs; latencies.csv is the one timing-dependent artifact.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report_path.write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    (out / "fig3_tolerance.csv").write_text(
        _csv_lines("tolerance,accuracy", report.tolerance_curve), encoding="utf-8"
    )
    (out / "fig4_pca.csv").write_text(
        _csv_lines("dimension,recall", report.pca_sweep), encoding="utf-8"
    )
    (out / "fig5_recallN.csv").write_text(
        _csv_lines("candidates,recall", report.recall_table), encoding="utf-8"
    )
    pr_rows = [
        (t, r, p)
        for t in sorted(report.pr_curves)
        for r, p in report.pr_curves[t].points
    ]
    (out / "fig6_pr.csv").write_text(
        _csv_lines("tolerance,recall,precision", pr_rows), encoding="utf-8"
    )
    (out / "fig7_auc.csv").write_text(
        _csv_lines(
            "tolerance,auc",
            [(t, report.pr_curves[t].auc) for t in sorted(report.pr_curves)],
        ),
        encoding="utf-8",
    )
    (out / "latencies.csv").write_text(
        _csv_lines(
            "query_frame,latency_ms",
            [(o.query_frame, o.latency_ms) for o in report.outcomes],
        ),
        encoding="utf-8",
    )
    return report_path
