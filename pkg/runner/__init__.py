"""Run orchestration: one entry point per CLI subcommand."""

from .service import COMMANDS, RunOutcome, run_pipeline

__all__ = ['COMMANDS', 'RunOutcome', 'run_pipeline']
