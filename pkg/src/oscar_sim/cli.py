"""Command-line entry point: one subcommand per pipeline stage.

Logs go to standard error; the output directory holds only machine-readable
artifacts. Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
import argparse
import logging
import sys
import traceback

from .config import ConfigError, ExperimentConfig, parse_config, with_overrides
from .diffusion import DiffusionError, OsdmError
from .encoder import EncoderError
from .evaluation import EvaluationError
from .federation import FederationError
from .numerics import NumericsError
from .pipeline import STAGES, PipelineError, run_ablation, run_pipeline
from .synthdata import CorpusError, OsfdError

_VALIDATION_ERRORS = (
    ConfigError,
    CorpusError,
    DiffusionError,
    EncoderError,
    EvaluationError,
    FederationError,
    NumericsError,
    OsdmError,
    OsfdError,
    PipelineError,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oscar-sim",
        description="One-shot federated learning simulator with a conditional "
        "diffusion server.",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES + ("all", "ablate"):
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="experiment config file (defaults apply if omitted)")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
        if name == "ablate":
            p.add_argument(
                "--counts",
                default="5,10,20,30",
                help="comma-separated n_per_rep values",
            )
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    args = _build_parser().parse_args(argv)
    try:
        config = parse_config(args.config) if args.config else ExperimentConfig()
        config = with_overrides(config, seed=args.seed, out=args.out)
        if args.stage == "ablate":
            try:
                counts = tuple(int(v) for v in args.counts.split(",") if v.strip())
            except ValueError:
                print(
                    f"error: --counts expects comma-separated integers, got '{args.counts}'",
                    file=sys.stderr,
                )
                return 1
            run_ablation(config, counts)
        else:
            run_pipeline(config, args.stage)
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
