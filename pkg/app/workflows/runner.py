"""Stage registry and the run-all driver for the experiment DAG."""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

from app.core.errors import StagePrerequisiteError
from app.workflows import classify, detect, evaluate, prepare, report, superres
from app.workflows.experiment import ExperimentConfig
from app.workflows.manifest import (
    RunContext,
    StageResult,
    begin_stage,
    export_manifest,
    fail_stage,
    finish_stage,
    mark_stages,
)


@dataclass(frozen=True)
class Stage:
    name: str
    run: Callable[[RunContext], StageResult]
    requires: tuple = ()
    always: bool = False


STAGES: Dict[str, Stage] = {
    s.name: s
    for s in (
        Stage("tile", prepare.tile),
        Stage("degrade", prepare.degrade, ("tile",)),
        Stage("scale", prepare.scale, ("degrade",)),
        Stage("train-sr", superres.train_sr, ("degrade",)),
        Stage("infer-sr", superres.infer_sr, ("degrade", "train-sr")),
        Stage("metrics", evaluate.metrics, ("scale", "infer-sr")),
        Stage("sweep", evaluate.sweep, ("tile", "train-sr")),
        Stage("train-classifier", classify.train_classifier),
        Stage("eval-classifier", classify.eval_classifier, ("train-classifier",)),
        Stage("eval-detection", detect.eval_detection),
        Stage("report", report.report, always=True),
    )
}

STAGE_ORDER: List[str] = list(STAGES)


def requirements(config: ExperimentConfig, stage: str) -> List[str]:
    """Stages whose outputs ``stage`` consumes under this config."""
    needs = list(STAGES[stage].requires)
    if stage in ("train-classifier", "eval-classifier"):
        if config.classifier is None:
            return []
        if any(s.startswith("sr:") for s in config.classifier_sources()):
            needs.append("train-sr")
    return needs


def dependents(config: ExperimentConfig, stage: str) -> List[str]:
    """Every stage downstream of ``stage``, in run order."""
    found = {stage}
    for name in STAGE_ORDER:
        if any(req in found for req in requirements(config, name)):
            found.add(name)
    found.discard(stage)
    return [name for name in STAGE_ORDER if name in found]


def ancestors(config: ExperimentConfig, stage: str) -> List[str]:
    """``stage`` and everything it transitively needs, in run order."""
    found = {stage}
    for name in reversed(STAGE_ORDER):
        if name in found:
            found.update(requirements(config, name))
    return [name for name in STAGE_ORDER if name in found]


def run_stage(ctx: RunContext, stage: str) -> str:
    """Run one stage unless it already completed for this config.

    Returns:
        ``"cached"`` when the stage was a no-op, otherwise the recorded status

    Raises:
        StagePrerequisiteError: If a required stage has not completed
        Exception: Whatever the stage raised; the failure is recorded first
    """
    spec = STAGES[stage]
    if not spec.always and not ctx.force and ctx.completed(stage):
        logging.info(f"Stage {stage} is up to date; skipping (use --force to rerun)")
        return "cached"
    for needed in requirements(ctx.config, stage):
        ctx.require(needed)

    logging.info(f"Running stage {stage}")
    begin_stage(ctx, stage)
    start = time.perf_counter()
    try:
        result = spec.run(ctx)
    except Exception as e:
        seconds = time.perf_counter() - start
        fail_stage(ctx, stage, f"{type(e).__name__}: {e}", seconds)
        export_manifest(ctx)
        logging.error(f"Stage {stage} failed after {seconds:.1f}s: {e}")
        raise
    seconds = time.perf_counter() - start
    finish_stage(ctx, stage, result, seconds)

    stale = [name for name in dependents(ctx.config, stage) if ctx.completed(name)]
    if stale:
        mark_stages(ctx, stale, "stale", f"upstream stage '{stage}' was rerun")
        logging.info(f"Marked {', '.join(stale)} stale")
    export_manifest(ctx)
    logging.info(f"Stage {stage} {result.status} in {seconds:.1f}s ({len(result.artifacts)} artifacts)")
    return result.status


def run_all(ctx: RunContext, target: Optional[str] = None) -> Dict[str, str]:
    """Run the DAG in order, up to ``target`` when given.

    A failing stage does not stop independent branches; its dependents are
    recorded as ``skipped``. The report is always assembled last.

    Returns:
        Stage name to outcome (``completed``, ``cached``, ``skipped`` or ``failed``)
    """
    stages = ancestors(ctx.config, target) if target else STAGE_ORDER
    outcome: Dict[str, str] = {}
    for stage in stages:
        blocked = [r for r in requirements(ctx.config, stage) if outcome.get(r) in ("failed", "skipped")]
        if blocked:
            reason = f"prerequisite '{blocked[0]}' {outcome[blocked[0]]}"
            mark_stages(ctx, [stage], "skipped", reason)
            logging.warning(f"Skipping stage {stage}: {reason}")
            outcome[stage] = "skipped"
            continue
        try:
            outcome[stage] = run_stage(ctx, stage)
        except StagePrerequisiteError as e:
            logging.error(str(e))
            outcome[stage] = "failed"
        except Exception:
            outcome[stage] = "failed"
    export_manifest(ctx)
    return outcome
