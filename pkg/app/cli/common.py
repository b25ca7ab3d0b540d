import argparse
import logging
from pathlib import Path
from typing import Optional

from app.core.config import settings
from app.workflows.experiment import load_config
from app.workflows.manifest import RunContext

# Process exit codes
EXIT_OK = 0
EXIT_INVALID = 1
EXIT_STAGE_FAILED = 2

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(output: Optional[Path] = None) -> None:
    """Log to stderr and, once the output directory is known, to a file inside it."""
    handlers = [logging.StreamHandler()]
    if output is not None:
        output.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(output / settings.log_file))
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, type=Path, help="experiment config (TOML)")
    parser.add_argument("--output", type=Path, help="output directory (default: $SRWB_OUTPUT_ROOT/<config name>)")
    parser.add_argument("--jobs", type=int, help="worker processes for the metric sweep")
    parser.add_argument("--seed-override", type=int, help="replace every seed in [seeds]")
    parser.add_argument("--force", action="store_true", help="rerun stages that are already complete")


def open_context(args: argparse.Namespace) -> RunContext:
    """Load the config named on the command line and open its run.

    Raises:
        ConfigError: If the config is unreadable or invalid
    """
    config = load_config(args.config, seed_override=args.seed_override, output_dir=args.output, jobs=args.jobs)
    setup_logging(Path(config.output_dir))
    return RunContext.open(config, force=args.force)
