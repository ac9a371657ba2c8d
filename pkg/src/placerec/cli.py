"""Command-line entry point: fit-pca, build-db, query, evaluate, gen-synthetic.

Thin wrappers over the library; anything the CLI does is reachable through
the module functions with identical results. Logs go to stderr, results to
stdout or the requested output paths. Exit codes: 0 success, 1 usage,
2 I/O failure, 3 data-contract violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .descriptor import CubeSpec, load_pca_model, save_pca_model
from .evaluation import run_benchmark, write_report
from .filtering import load_image_filter_db, save_image_filter_db
from .pipeline import (
    PipelineConfig,
    build_reference_databases,
    fit_stage_model,
    prepare_query,
    query_databases,
)
from .spatial import load_spatial_match_db, save_spatial_match_db
from .synthetic import generate_synthetic_dataset
from .tensor_io import load_ground_truth, load_manifest, read_grid

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DATA = 3

log = logging.getLogger("placerec")


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for
    I/O and use 1 for usage."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _cube_spec(text: str) -> CubeSpec:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected K,S, got {text!r}")
    try:
        return CubeSpec(int(parts[0]), int(parts[1]))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


_CONFIG_FILE_KEYS = {
    "output_dim",
    "candidates",
    "tolerance",
    "stage1_cube",
    "stage2_cube",
    "threads",
    "rank_weighted",
    "max_fit_samples",
    "recall_values",
    "tolerance_values",
    "pr_tolerances",
    "pca_dims",
}

_FLAG_TO_KEY = {
    "dim": "output_dim",
    "candidates": "candidates",
    "tolerance": "tolerance",
    "stage1_cube": "stage1_cube",
    "stage2_cube": "stage2_cube",
    "threads": "threads",
    "rank_weighted": "rank_weighted",
    "max_fit_samples": "max_fit_samples",
    "recall_values": "recall_values",
    "tolerance_values": "tolerance_values",
    "pr_tolerances": "pr_tolerances",
    "pca_dims": "pca_dims",
}


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, overridden by the TOML config file, overridden by flags."""
    values: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, "rb") as fh:
            file_values = tomllib.load(fh)
        unknown = set(file_values) - _CONFIG_FILE_KEYS
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(file_values)
    for attr, key in _FLAG_TO_KEY.items():
        flag_value = getattr(args, attr, None)
        if flag_value is not None:
            values[key] = flag_value
    for key in ("stage1_cube", "stage2_cube"):
        if key in values and not isinstance(values[key], CubeSpec):
            pair = values[key]
            if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
                raise ValueError(f"{key} must be a [cube_size, stride] pair")
            values[key] = CubeSpec(int(pair[0]), int(pair[1]))
    return PipelineConfig(**values)


def _add_config_flags(parser: argparse.ArgumentParser, evaluation: bool = False) -> None:
    parser.add_argument("--config", metavar="FILE", help="TOML config file; flags win over it")
    parser.add_argument("--dim", type=int, metavar="D", help="PCA output dimension (default 100)")
    parser.add_argument("--candidates", type=int, metavar="N", help="stage-1 candidate count (default 50)")
    parser.add_argument("--tolerance", type=int, metavar="T", help="frame tolerance (default 2)")
    parser.add_argument("--stage1-cube", type=_cube_spec, metavar="K,S", help="stage-1 cube size and stride (default 7,2)")
    parser.add_argument("--stage2-cube", type=_cube_spec, metavar="K,S", help="stage-2 cube size and stride (default 3,2)")
    parser.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    parser.add_argument("--rank-weighted", action=argparse.BooleanOptionalAction, default=None, help="weight stage-1 votes by rank")
    parser.add_argument("--max-fit-samples", type=int, metavar="M", help="cap on PCA fit rows (first M kept)")
    if evaluation:
        parser.add_argument("--recall-values", type=_int_list, metavar="N1,N2,...", help="recall@N table depths")
        parser.add_argument("--tolerance-values", type=_int_list, metavar="T1,T2,...", help="tolerance sweep points")
        parser.add_argument("--pr-tolerances", type=_int_list, metavar="T1,T2,...", help="tolerances for PR curves")
        parser.add_argument("--pca-dims", type=_int_list, metavar="D1,D2,...", help="extra dimensions for the PCA recall sweep")


def _build_parser() -> _Parser:
    parser = _Parser(prog="placerec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-pca", help="fit a PCA model over a manifest's grids")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit_pca)

    p = sub.add_parser("build-db", help="build the filtering and spatial databases")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage1-model", required=True)
    p.add_argument("--stage2-model", required=True)
    p.add_argument("--filter-out", required=True)
    p.add_argument("--spatial-out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="match one query image against the databases")
    p.add_argument("--filter-db", required=True)
    p.add_argument("--spatial-db", required=True)
    p.add_argument("--stage1-model", required=True)
    p.add_argument("--stage2-model", required=True)
    p.add_argument("--stage1-grid", required=True)
    p.add_argument("--stage2-grid", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="run the full benchmark and write a report")
    p.add_argument("--reference", required=True, help="reference manifest CSV")
    p.add_argument("--queries", required=True, help="query manifest CSV")
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--dataset-name", help="name recorded in the report (default: query manifest stem)")
    _add_config_flags(p, evaluation=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gen-synthetic", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=50)
    p.add_argument("--depth", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)

    return parser


def cmd_fit_pca(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    manifest = load_manifest(args.manifest)
    spec = config.stage1_cube if args.stage == 1 else config.stage2_cube
    log.info("fitting stage-%d model on %d images", args.stage, len(manifest))
    model = fit_stage_model(
        manifest, args.stage, spec, config.output_dim, config.max_fit_samples
    )
    save_pca_model(model, args.out)
    assert model.variances is not None
    total = float(model.variances.sum())
    head = ", ".join(f"{v:.6g}" for v in model.variances[:8])
    print(f"model: {args.out}")
    print(f"input_dim: {model.input_dim}  output_dim: {model.output_dim}")
    print(f"captured variance: {total:.6g}")
    print(f"leading component variances: {head}")
    return EXIT_OK


def cmd_build(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    manifest = load_manifest(args.manifest)
    stage1_model = load_pca_model(args.stage1_model)
    stage2_model = load_pca_model(args.stage2_model)
    log.info("building databases from %d images", len(manifest))
    filter_db, spatial_db = build_reference_databases(
        manifest, stage1_model, stage2_model, config
    )
    save_image_filter_db(filter_db, args.filter_out)
    save_spatial_match_db(spatial_db, args.spatial_out)
    print(f"filter db: {args.filter_out} ({filter_db.record_count} records)")
    print(
        f"spatial db: {args.spatial_out} "
        f"({spatial_db.image_count} images, grid {spatial_db.grid_side}x{spatial_db.grid_side})"
    )
    return EXIT_OK


def cmd_query(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    filter_db = load_image_filter_db(args.filter_db)
    spatial_db = load_spatial_match_db(args.spatial_db)
    stage1_model = load_pca_model(args.stage1_model)
    stage2_model = load_pca_model(args.stage2_model)
    grid1 = read_grid(args.stage1_grid)
    grid2 = read_grid(args.stage2_grid)
    if config.candidates > filter_db.record_count:
        log.info(
            "candidate budget %d exceeds %d stored records; clamping",
            config.candidates,
            filter_db.record_count,
        )
        config.candidates = filter_db.record_count
    cubes1, lattice2 = prepare_query(stage1_model, stage2_model, grid1, grid2, config)
    _, result = query_databases(filter_db, spatial_db, cubes1, lattice2, config)
    print(f"best_frame: {result.best_frame}")
    print(f"score: {result.score}")
    print(f"confidence: {result.confidence:.6f}")
    print("rank,frame,score")
    for rank, (frame, score) in enumerate(result.ranked[:10], start=1):
        print(f"{rank},{frame},{score}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    reference = load_manifest(args.reference)
    queries = load_manifest(args.queries)
    ground_truth = load_ground_truth(args.ground_truth)
    log.info(
        "evaluating %d queries against %d references", len(queries), len(reference)
    )
    report = run_benchmark(
        reference, queries, ground_truth, config, dataset_name=args.dataset_name
    )
    report_path = write_report(report, args.out)
    print(f"accuracy at tolerance {config.tolerance}: {report.accuracy:.4f}")
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    dataset = generate_synthetic_dataset(
        args.out,
        image_count=args.images,
        depth=args.depth,
        noise_ratio=args.noise,
        seed=args.seed,
    )
    print(f"reference manifest: {dataset.reference_manifest}")
    print(f"query manifest: {dataset.query_manifest}")
    print(f"ground truth: {dataset.ground_truth}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
