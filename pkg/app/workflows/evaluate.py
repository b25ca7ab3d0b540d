import logging
from functools import partial
from typing import Dict, List

from app.core.metrics import MetricsReport, SweepCell, SweepTable, compare, sweep as sweep_table
from app.core.resample import upscale_4x
from app.core.srgan import as_sr_model, load_checkpoint
from app.core.tiling import read_chips
from app.workflows import layout
from app.workflows.manifest import RunContext, StageResult, write_text_atomic

BASELINE_MODEL = "baseline"


def _score_directory(ctx: RunContext, dataset: str, candidates_root) -> MetricsReport:
    references = read_chips(layout.chips_root(ctx, "test") / dataset, dataset)
    candidates = read_chips(candidates_root / dataset, dataset)
    by_id = dict(zip(candidates.ids(), candidates.chips))
    refs, cands, ids = [], [], []
    for ref, chip_id in zip(references.chips, references.ids()):
        if chip_id in by_id:
            refs.append(ref)
            cands.append(by_id[chip_id])
            ids.append(chip_id)
        else:
            logging.warning(f"No candidate for {dataset}/{chip_id} in {candidates_root}")
    report = compare(refs, cands, ids)
    report.skipped += len(references) - len(refs)
    return report


def metrics(ctx: RunContext) -> StageResult:
    """Score the scaled baseline and every model's SR output against the HR test chips."""
    cfg = ctx.config
    sources = {BASELINE_MODEL: layout.baseline_root(ctx)}
    sources.update({name: layout.sr_root(ctx, name) for name in cfg.sr_models()})

    table = SweepTable(kernel=cfg.degradation.label())
    for source, root in sources.items():
        for dataset in sorted(cfg.dataset.scenes):
            report = _score_directory(ctx, dataset, root)
            table.cells.append(SweepCell(model=source, dataset=dataset, report=report))
            logging.info(
                f"{source} on {dataset}: PSNR {report.psnr_mean:.3f} dB, SSIM {report.ssim_mean:.4f} "
                f"({report.count} chips, {report.skipped} skipped)"
            )
    path = write_text_atomic(table.model_dump_json(indent=2), layout.results_path(ctx, "metrics.json"))
    return StageResult([path], {"cells": len(table.cells)})


def sweep(ctx: RunContext) -> StageResult:
    """Degrade, super-resolve and score the HR test chips under every sweep kernel."""
    cfg = ctx.config
    models = {name: as_sr_model(load_checkpoint(layout.model_path(ctx, name))) for name in cfg.sr_models()}
    if cfg.sweep.include_baseline:
        models[BASELINE_MODEL] = partial(upscale_4x, spec=cfg.baseline)

    datasets: Dict[str, List] = {}
    ids: Dict[str, List[str]] = {}
    for dataset in sorted(cfg.dataset.scenes):
        chips = read_chips(layout.chips_root(ctx, "test") / dataset, dataset)
        datasets[dataset] = chips.chips
        ids[dataset] = chips.ids()

    result = StageResult(details={"kernels": []})
    for index, kernel in enumerate(cfg.sweep.kernels or [cfg.degradation]):
        table = sweep_table(models, datasets, kernel, jobs=cfg.jobs, ids=ids)
        path = layout.results_path(ctx, f"sweep_{index}.json")
        result.artifacts.append(write_text_atomic(table.model_dump_json(indent=2), path))
        result.details["kernels"].append(kernel.label())
        logging.info(f"Sweep under {kernel.label()}:\n{table.format_table()}")
    return result
