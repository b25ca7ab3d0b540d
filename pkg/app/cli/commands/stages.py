"""One subcommand per pipeline stage plus ``run-all``."""

import argparse
import logging

from app.cli.common import EXIT_INVALID, EXIT_OK, EXIT_STAGE_FAILED, add_run_arguments, open_context, setup_logging
from app.core.errors import ConfigError, StagePrerequisiteError
from app.workflows.runner import STAGE_ORDER, STAGES, run_all, run_stage

logger = logging.getLogger(__name__)

STAGE_HELP = {
    "tile": "cut land-use scenes into HR chips and split them into train/test",
    "degrade": "make LR chips by 4x down-scaling the HR chips",
    "scale": "enlarge the LR test chips with the baseline kernel",
    "train-sr": "train one SRGAN per land-use dataset",
    "infer-sr": "super-resolve the LR test chips with every SRGAN",
    "metrics": "PSNR/SSIM of baseline and SR output against the HR test chips",
    "sweep": "PSNR/SSIM tables under each configured degradation kernel",
    "train-classifier": "train a ship classifier per input source",
    "eval-classifier": "test-set accuracy and confusion of each ship classifier",
    "eval-detection": "per-class AP and mAP of a detections CSV against VOC ground truth",
    "report": "CSV tables, text summary and PNG panels from completed stages",
}


def register(subparsers: argparse._SubParsersAction) -> None:
    for name in STAGE_ORDER:
        parser = subparsers.add_parser(name, help=STAGE_HELP[name], description=STAGE_HELP[name])
        add_run_arguments(parser)
        parser.set_defaults(handler=handle_stage, stage=name)

    parser = subparsers.add_parser("run-all", help="run the whole experiment DAG in order")
    add_run_arguments(parser)
    parser.add_argument("--stage", choices=list(STAGES), help="stop after this stage (and what it needs)")
    parser.set_defaults(handler=handle_run_all)


def handle_stage(args: argparse.Namespace) -> int:
    """Run a single stage and translate failures into exit codes."""
    try:
        ctx = open_context(args)
    except ConfigError as e:
        setup_logging()
        logger.error(str(e))
        return EXIT_INVALID

    try:
        status = run_stage(ctx, args.stage)
    except StagePrerequisiteError as e:
        logger.error(str(e))
        return EXIT_STAGE_FAILED
    except Exception as e:
        logger.error(f"Stage {args.stage} failed: {e}")
        return EXIT_STAGE_FAILED
    finally:
        ctx.db.dispose()
    print(f"{args.stage}: {status}")
    return EXIT_OK


def handle_run_all(args: argparse.Namespace) -> int:
    try:
        ctx = open_context(args)
    except ConfigError as e:
        setup_logging()
        logger.error(str(e))
        return EXIT_INVALID

    try:
        outcome = run_all(ctx, target=args.stage)
    finally:
        ctx.db.dispose()
    width = max(len(s) for s in outcome)
    for stage, status in outcome.items():
        print(f"{stage:<{width}}  {status}")
    print(f"output: {ctx.output}")
    return EXIT_STAGE_FAILED if "failed" in outcome.values() else EXIT_OK
