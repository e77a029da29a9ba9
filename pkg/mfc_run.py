#!/usr/bin/env python3
"""
Mean-field control runner.

Solves the discretized optimal control problem for a run configuration and
runs the verification checks against it. Exit codes: 0 all requested checks
passed, 1 a check failed, 2 invalid configuration, 3 the solver did not
converge, 4 the convexity gate or another assumption gate refused the run.

Usage:
    python mfc_run.py solve --config configs/lq_scalar.json
    python mfc_run.py lq-validate --config configs/lq_scalar.json --steps 100
    python mfc_run.py grad-check --model lq_scalar --atoms 50 --scenarios 20
"""

import argparse
import logging
import sys

from config import config

# Configure logging FIRST
log_format = '%(asctime)s - %(levelname)s - %(message)s'

log_handlers = [logging.StreamHandler()]

if config.log_to_file:
    file_handler = logging.FileHandler('mfc-run.log')
    file_handler.setFormatter(logging.Formatter(log_format))
    log_handlers.append(file_handler)

logging.basicConfig(
    level=getattr(logging, config.log_level, logging.INFO),
    format=log_format,
    handlers=log_handlers
)
logger = logging.getLogger(__name__)

from mfc.errors import AssumptionGateError, ConfigError, ConvergenceError, MfcError  # noqa: E402
from run_config import CHECKS, RunConfig  # noqa: E402
from runner.service import (  # noqa: E402
    COMMANDS, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_FAILED, EXIT_GATE, RunOutcome,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Solve and verify discretized mean-field type control problems")
    parser.add_argument('command', choices=sorted(COMMANDS), help="What to run")
    parser.add_argument('--config', help="JSON run configuration")
    parser.add_argument('--seed', type=int, help="Seed for atoms and noise")
    parser.add_argument('--out', help="Output directory for artifacts")
    parser.add_argument('--force', action='store_true', default=None,
                        help="Run even when the convexity margin c0 is not positive")
    parser.add_argument('--atoms', type=int, help="Number of atoms M")
    parser.add_argument('--scenarios', type=int, help="Scenarios per atom K")
    parser.add_argument('--steps', type=int, help="Time steps N")
    parser.add_argument('--threads', type=int, help="Worker threads for independent probes")
    parser.add_argument('--model', help="Builtin cost model name")
    parser.add_argument('--check', action='append', choices=CHECKS,
                        help="Extra check to run after solving (repeatable)")
    return parser


def overrides_from(args: argparse.Namespace) -> dict:
    """CLI flags as dotted RunConfig overrides; unset flags are dropped."""
    return {
        'ensemble.seed': args.seed,
        'output_dir': args.out,
        'force': args.force,
        'ensemble.M': args.atoms,
        'ensemble.K': args.scenarios,
        'grid.N': args.steps,
        'threads': args.threads,
        'model.name': args.model,
        'diagnostics.checks': args.check,
    }


def print_summary(outcome: RunOutcome):
    summary = outcome.summary
    print(f"\n📊 {str(summary.get('command', '')).upper()} SUMMARY")
    print("=" * 50)
    print(f"  Exit code: {outcome.exit_code}")
    if 'c0' in summary:
        print(f"  c0: {summary['c0']}")
    solve = summary.get('solve') or {}
    if solve:
        print(f"  Method: {solve.get('method')}  converged={solve.get('converged')}  "
              f"iterations={solve.get('iterations')}")
        print(f"  Value: {solve.get('value')}")
    for name, result in (summary.get('checks') or {}).items():
        print(f"  {'✅' if result.get('passed') else '❌'} {name}")
    if 'error' in summary:
        print(f"  Error: {summary['error']}")
    for path in outcome.artifacts:
        print(f"  📝 {path}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, overrides_from(args))
        outcome = COMMANDS[args.command](cfg)
    except ConfigError as e:
        logger.error(f"❌ Configuration error: {e}")
        for issue in e.issues:
            logger.error(f"   {issue}")
        return EXIT_CONFIG
    except AssumptionGateError as e:
        logger.error(f"❌ Assumption gate: {e}")
        return EXIT_GATE
    except ConvergenceError as e:
        logger.error(f"❌ Did not converge: {e}")
        return EXIT_CONVERGENCE
    except MfcError as e:
        logger.error(f"❌ Run failed: {e}")
        return EXIT_FAILED

    print_summary(outcome)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
