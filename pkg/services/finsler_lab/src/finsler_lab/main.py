import argparse
import logging
import sys
from typing import Optional, Sequence

from finsler_lab.config import get_settings
from finsler_lab.errors import (
    DomainError,
    FinslerLabError,
    InfeasibleError,
    ParameterError,
    ScenarioError,
)
from finsler_lab.models import CheckStatus
from finsler_lab.reports import load_summary, resummarize, write_summary
from finsler_lab.runner import (
    EXIT_FAILED,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_SCENARIO,
    NUMERIC_ABORTS,
    exit_code_for,
    run_scenario,
    scan_curvature,
)

settings = get_settings()

logging.basicConfig(
    level=settings.LOG_LEVEL,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="finsler-lab",
        description="Solve the log-Schrodinger flow and verify its gradient estimates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Solve a scenario and run its checks")
    run.add_argument("scenario", type=str, help="Scenario file (JSON)")
    run.add_argument("--out", type=str, default=None, help="Output directory")
    run.add_argument("--seed", type=int, default=None, help="Seed for sampled pairs")
    run.add_argument(
        "--checks",
        type=str,
        default=None,
        help="Comma-separated checks overriding the scenario's list",
    )
    run.add_argument(
        "--refine", type=int, default=0, help="Halve the grid spacing k times"
    )

    scan = sub.add_parser("scan-curvature", help="Curvature scan of the scenario ball")
    scan.add_argument("scenario", type=str, help="Scenario file (JSON)")
    scan.add_argument("--out", type=str, default=None, help="Output directory")

    report = sub.add_parser("report", help="Re-summarize a finished run")
    report.add_argument("directory", type=str, help="Run output directory")
    return parser


def _run(args: argparse.Namespace) -> int:
    checks = [c.strip() for c in args.checks.split(",")] if args.checks else None
    report = run_scenario(
        args.scenario, out=args.out, seed=args.seed, checks=checks, refine=args.refine
    )
    for name, summary in report.checks.items():
        print(f"{name:16s} {summary.status.value:20s} min margin {summary.min_margin}")
    return report.exit_code


def _scan(args: argparse.Namespace) -> int:
    report = scan_curvature(args.scenario, out=args.out)
    extras = report.extras
    print(f"K(2R) = {extras['scanned_K2R']:.6g}  K0 part = {extras['scanned_K0']:.6g}")
    return EXIT_OK if report.status == CheckStatus.PASSED else EXIT_FAILED


def _report(args: argparse.Namespace) -> int:
    stored = load_summary(args.directory)
    checks = resummarize(args.directory)
    code = exit_code_for([s.status for s in checks.values()])
    updated = stored.model_copy(update={"checks": checks, "exit_code": code})
    write_summary(updated, args.directory)
    for name, summary in checks.items():
        print(f"{name:16s} {summary.status.value:20s} min margin {summary.min_margin}")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"run": _run, "scan-curvature": _scan, "report": _report}
    try:
        return handlers[args.command](args)
    except ScenarioError as e:
        logger.error(f"Scenario error: {str(e)}")
        return EXIT_SCENARIO
    except (ParameterError, InfeasibleError, DomainError) as e:
        logger.error(f"Parameter error: {str(e)}")
        return EXIT_FAILED
    except NUMERIC_ABORTS as e:
        logger.error(f"Numeric abort: {str(e)}")
        return EXIT_NUMERIC
    except FinslerLabError as e:
        logger.error(f"Run failed: {str(e)}")
        return EXIT_FAILED
    except FileNotFoundError as e:
        logger.error(f"Missing run output: {str(e)}")
        return EXIT_SCENARIO


if __name__ == "__main__":
    sys.exit(main())
