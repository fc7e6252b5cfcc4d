"""Command-line entry point: ``prefscope <stage> [options]``.

Exit codes: 0 success, 2 validation, 3 missing upstream stage,
4 provider or transport failure, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .errors import (
    AnnotationError,
    DependencyError,
    FormatError,
    InsufficientDataError,
    ModelStateError,
    NumericError,
    PrefscopeError,
    ProviderContractError,
    TransportError,
    ValidationError,
)
from .pipeline import STAGES, load_config, run_all, run_stage

logger = logging.getLogger("prefscope")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DEPENDENCY = 3
EXIT_PROVIDER = 4
EXIT_NUMERIC = 5


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, DependencyError):
        return EXIT_DEPENDENCY
    if isinstance(exc, (TransportError, ProviderContractError, AnnotationError, FormatError)):
        return EXIT_PROVIDER
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (ValidationError, InsufficientDataError, ModelStateError)):
        return EXIT_VALIDATION
    return EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML config file")
    common.add_argument("--run-dir", help="run directory (overrides run_dir)")
    common.add_argument("--seed", type=int, help="global seed (overrides seed)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set sae.epochs=50 (repeatable)")
    common.add_argument("--force", action="store_true", help="rerun even if inputs are unchanged")
    common.add_argument("--strict-stale", action="store_true",
                        help="fail instead of recomputing when artifacts are stale")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="prefscope", description="Interpretable preference-data analysis.")
    parser.add_argument("--version", action="version", version=f"prefscope {__version__}")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="STAGE")
    helps = {
        "synth": "generate a synthetic dataset with planted ground truth",
        "ingest": "load and preprocess the dataset",
        "embed": "embed responses and compute embedding differences",
        "train-sae": "train the sparse autoencoder and encode all pairs",
        "interpret": "describe features and score description fidelity",
        "analyze": "per-feature effects, win-rate effects and AUC",
        "subjectivity": "annotator heterogeneity and subgroup tests",
        "personalize": "evaluate per-annotator personalization",
        "curate": "flip labels on pairs flagged by a feature",
        "elo": "Bradley-Terry leaderboard before and after curation",
        "report": "assemble the markdown report and figure data",
    }
    for stage in STAGES:
        p = sub.add_parser(stage, parents=[common], help=helps[stage])
        if stage in ("curate", "elo"):
            p.add_argument("--feature", type=int, help="feature to curate on")
            p.add_argument("-n", type=int, help="number of pairs to flip")
            p.add_argument("--direction", choices=["+1", "-1"],
                           help="sign of the feature whose preference is removed (required)")
        if stage == "report":
            p.add_argument("--strict", action="store_true", help="exit nonzero if sections are missing")
    p = sub.add_parser("run", parents=[common], help="run every stage in order")
    p.add_argument("--with-synth", action="store_true", help="generate synthetic data first")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.run_dir:
        overrides.append(f"run_dir={args.run_dir}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "feature", None) is not None:
        overrides.append(f"curation.feature={args.feature}")
    if getattr(args, "n", None) is not None:
        overrides.append(f"curation.n={args.n}")
    if getattr(args, "direction", None) is not None:
        overrides.append(f"curation.direction='{args.direction}'")
    if getattr(args, "strict", False):
        overrides.append("report.strict=true")
    try:
        cfg = load_config(args.config, overrides)
        if args.stage == "run":
            results = run_all(cfg, force=args.force, with_synth=args.with_synth)
        else:
            results = [run_stage(args.stage, cfg, force=args.force, strict_stale=args.strict_stale)]
    except PrefscopeError as exc:
        print(f"prefscope: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    for r in results:
        status = "up to date" if r.skipped else "done"
        print(f"{r.stage}: {status} ({', '.join(r.outputs)})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
