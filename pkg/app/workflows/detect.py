import logging

from app.core.detection import evaluate_detections, load_detections
from app.core.voc import read_voc_dir
from app.workflows import layout
from app.workflows.manifest import RunContext, StageResult, write_text_atomic


def eval_detection(ctx: RunContext) -> StageResult:
    """Score an external detections CSV against VOC ground truth.

    Skipped (not failed) when the config has no ``[detection]`` section.
    """
    cfg = ctx.config.detection
    if cfg is None:
        logging.info("No [detection] section in the config; skipping detection evaluation")
        return StageResult(status="skipped", details={"reason": "no detection section"})

    ground_truth = read_voc_dir(cfg.annotations)
    detections = load_detections(cfg.detections)
    logging.info(f"Evaluating {len(detections)} detections against {len(ground_truth)} annotated images")
    report = evaluate_detections(detections, ground_truth, cfg.iou_threshold, cfg.interpolation)
    path = write_text_atomic(report.model_dump_json(indent=2), layout.results_path(ctx, "detection.json"))
    return StageResult([path], {"mean_ap": report.mean_ap, "classes": len(report.per_class)})
