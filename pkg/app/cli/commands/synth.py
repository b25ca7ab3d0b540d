import argparse
import logging
from pathlib import Path

from app.cli.common import EXIT_OK, setup_logging
from app.core.synthetic import write_mini_dataset

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser(
        "synth",
        help="write the deterministic synthetic mini-dataset and a matching config",
    )
    parser.add_argument("directory", type=Path, help="where to write the dataset")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--scenes-per-class", type=int, default=8)
    parser.add_argument("--ship-chips", type=int, default=24, help="chips per ship / no-ship class")
    parser.set_defaults(handler=handle_synth)


def handle_synth(args: argparse.Namespace) -> int:
    setup_logging()
    config = write_mini_dataset(
        args.directory, seed=args.seed, scenes_per_class=args.scenes_per_class, ship_chips=args.ship_chips
    )
    logger.info(f"Synthetic dataset written to {args.directory}")
    print(config)
    return EXIT_OK
