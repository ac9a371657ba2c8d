"""Command line wrapper: `extract --images DIR --out DIR [--weights ...]`.

Exit codes follow the engine's convention: 0 success, 1 usage, 2 I/O
failure, 3 bad data or configuration.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .export import ExtractionJob, extract_dataset
from .model import WEIGHT_SOURCES, FeatureExtractor, build_backbone, resolve_weights

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DATA = 3

log = logging.getLogger("placerec_extractor")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="placerec-extract", description=__doc__.splitlines()[0])
    parser.add_argument("--images", required=True, metavar="DIR", help="directory of input images")
    parser.add_argument("--out", required=True, metavar="DIR", help="output directory for grids and manifest")
    parser.add_argument("--weights", choices=WEIGHT_SOURCES, default="places205",
                        help="pretrained weight source (default places205)")
    parser.add_argument("--weights-file", metavar="FILE",
                        help="checkpoint file overriding the packaged weights")
    return parser


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
        state, provenance = resolve_weights(args.weights, args.weights_file)
        extractor = FeatureExtractor(build_backbone(state))
        result = extract_dataset(
            ExtractionJob(image_dir=Path(args.images), out_dir=Path(args.out)),
            extractor,
            provenance,
        )
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    print(f"manifest: {result.manifest}")
    print(f"exported: {result.exported} images ({result.skipped} skipped)")
    print(f"weights: {provenance}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
