"""Entry point of the ``srwb`` command."""

import argparse
import sys
from typing import List, Optional

from app import __version__
from app.cli.commands import stages, synth
from app.cli.common import EXIT_INVALID


class _Parser(argparse.ArgumentParser):
    """Usage errors count as invalid input (exit 1), not as a stage failure."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="srwb",
        description="Desk-scale SRGAN super-resolution experiments on satellite imagery chips",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    stages.register(subparsers)
    synth.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and run the chosen command.

    Returns:
        0 on success, 1 for an invalid config, 2 when a stage fails
    """
    args = build_parser().parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
