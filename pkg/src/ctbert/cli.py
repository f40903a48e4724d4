"""Command-line entry point: ``ctbert <stage> [--config FILE] [--seed N] [--output DIR] [--force]``.

On success a JSON summary goes to stdout and the exit code is 0.  On
failure one JSON error line goes to stderr and the exit code is nonzero
(2 configuration, 3 missing upstream artifact, 4 corrupt input, 1 other).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .exceptions import ConfigurationError, CorruptInputError, MissingArtifactError
from .pipeline import STAGES, run_pipeline

EXIT_CODES = {ConfigurationError: 2, MissingArtifactError: 3, CorruptInputError: 4}


def build_parser():
    parser = argparse.ArgumentParser(prog="ctbert", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", help="YAML run config (defaults are used when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--output", help="override the output directory")
        p.add_argument("--data-root", help="override data.root")
        p.add_argument("--force", action="store_true", help="re-run even if the stage is complete")
        p.add_argument("--debug", action="store_true",
                       help="write mask/bbox overlays (preprocess) or clip grids (train-classifier)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = load_config(args.config, seed=args.seed, output_dir=args.output,
                             **{"data.root": args.data_root})
        record = run_pipeline(config, args.stage, force=args.force, debug=args.debug)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        code = next((c for t, c in EXIT_CODES.items() if isinstance(exc, t)), 1)
        error = {"status": "error", "stage": args.stage, "type": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, MissingArtifactError) and exc.required_stage:
            error["required_stage"] = exc.required_stage
        print(json.dumps(error), file=sys.stderr)
        if args.verbose:
            logging.exception("stage %s failed", args.stage)
        return code
    print(json.dumps({"status": "ok", **record}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
