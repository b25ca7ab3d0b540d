"""Where each stage keeps its outputs inside the run directory."""

import shutil
from pathlib import Path

from app.workflows.manifest import RunContext

CHIPS = "chips"
LR = "lr"
BASELINE = "baseline"
MODELS = "models"
SR = "sr"
CLASSIFIERS = "classifiers"
RESULTS = "results"
REPORT = "report"


def chips_root(ctx: RunContext, split: str) -> Path:
    return ctx.path(CHIPS, split)


def lr_root(ctx: RunContext, split: str) -> Path:
    return ctx.path(LR, split)


def baseline_root(ctx: RunContext) -> Path:
    return ctx.path(BASELINE)


def sr_root(ctx: RunContext, model: str) -> Path:
    return ctx.path(SR, model)


def model_path(ctx: RunContext, model: str) -> Path:
    return ctx.path(MODELS, f"{model}.ckpt")


def loss_log_path(ctx: RunContext, model: str) -> Path:
    return ctx.path(MODELS, f"{model}_loss.csv")


def previews_dir(ctx: RunContext, model: str) -> Path:
    return ctx.path(MODELS, f"{model}_previews")


def source_slug(source: str) -> str:
    return source.replace(":", "_")


def classifier_path(ctx: RunContext, source: str) -> Path:
    return ctx.path(CLASSIFIERS, f"{source_slug(source)}.ckpt")


def history_path(ctx: RunContext, source: str) -> Path:
    return ctx.path(CLASSIFIERS, f"{source_slug(source)}_history.csv")


def results_path(ctx: RunContext, name: str) -> Path:
    return ctx.path(RESULTS, name)


def reset_dir(path: Path) -> Path:
    """Remove a stage output directory and recreate it empty."""
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path
