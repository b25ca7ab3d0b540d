import logging
from dataclasses import dataclass
from typing import Callable, Dict, List

from pydantic import TypeAdapter

from app.core.classifier import (
    EvalResult,
    build,
    evaluate,
    load_classifier,
    save_classifier,
    train,
    write_history,
)
from app.core.errors import DatasetError
from app.core.images import ImageTensor
from app.core.resample import upscale_4x
from app.core.srgan import as_sr_model, load_checkpoint
from app.core.tiling import chip_id, read_dataset, split
from app.workflows import layout
from app.workflows.manifest import RunContext, StageResult, write_text_atomic

# Label index of each ship-data class directory
SHIP_CLASSES = ("no_ship", "ship")

EVAL_RESULTS = TypeAdapter(Dict[str, EvalResult])

UNCONFIGURED = StageResult(status="skipped", details={"reason": "no classifier section"})


@dataclass
class ShipSplit:
    train_images: List[ImageTensor]
    train_labels: List[int]
    test_images: List[ImageTensor]
    test_labels: List[int]

    @property
    def test_ids(self) -> List[str]:
        return [chip_id(im) for im in self.test_images]


def ship_split(ctx: RunContext) -> ShipSplit:
    """Deterministic train/test split of the ship chips.

    Raises:
        DatasetError: If the ship data lacks a ``ship`` or ``no_ship`` directory
    """
    cfg = ctx.config.classifier
    data = read_dataset(cfg.data)
    missing = [name for name in SHIP_CLASSES if name not in data or not len(data[name])]
    if missing:
        raise DatasetError(f"Ship data {cfg.data} has no chips for {missing}")

    images: List[ImageTensor] = []
    labels: List[int] = []
    for label, name in enumerate(SHIP_CLASSES):
        images += data[name].chips
        labels += [label] * len(data[name])

    parts = split(
        list(range(len(images))),
        (1.0 - cfg.test_fraction, cfg.test_fraction),
        ctx.config.seeds.classifier,
        [SHIP_CLASSES[v] for v in labels],
    )
    train_idx, test_idx = parts.partitions
    logging.info(f"Ship split: {len(train_idx)} train / {len(test_idx)} test, proportions {parts.label_proportions}")
    return ShipSplit(
        [images[i] for i in train_idx], [labels[i] for i in train_idx],
        [images[i] for i in test_idx], [labels[i] for i in test_idx],
    )


def source_transform(ctx: RunContext, source: str) -> Callable[[ImageTensor], ImageTensor]:
    """Map a raw 80 px chip to the classifier input of a source.

    ``raw`` keeps the chip, ``scaled`` enlarges it with the baseline kernel and
    ``sr:<model>`` super-resolves it with a trained SRGAN.
    """
    if source == "raw":
        return lambda chip: chip
    if source == "scaled":
        return lambda chip: upscale_4x(chip, ctx.config.baseline)
    model = source.split(":", 1)[1]
    ctx.require("train-sr")
    return as_sr_model(load_checkpoint(layout.model_path(ctx, model)))


def train_classifier(ctx: RunContext) -> StageResult:
    """Train one ship classifier per source (raw, scaled, each SR model)."""
    cfg = ctx.config
    if cfg.classifier is None:
        return UNCONFIGURED
    data = ship_split(ctx)
    result = StageResult(details={"sources": {}})
    for source in cfg.classifier_sources():
        transform = source_transform(ctx, source)
        images = [transform(im) for im in data.train_images]
        model = build(cfg.classifier.spec(images[0].width), seed=cfg.seeds.classifier)
        logging.info(f"Training classifier '{source}' on {len(images)} {images[0].width}px chips")
        trained, history = train(model, images, data.train_labels, cfg.classifier.train_config(cfg.seeds.classifier))

        result.artifacts.append(save_classifier(trained, layout.classifier_path(ctx, source)))
        result.artifacts.append(write_history(history, layout.history_path(ctx, source)))
        last = history[-1] if history else None
        result.details["sources"][source] = {
            "input_size": images[0].width,
            "parameters": trained.graph.num_parameters(),
            "epochs": len(history),
            "train_acc": last.train_acc if last else None,
            "val_acc": last.val_acc if last else None,
        }
    return result


def eval_classifier(ctx: RunContext) -> StageResult:
    """Evaluate every trained classifier on its source's view of the test chips."""
    cfg = ctx.config
    if cfg.classifier is None:
        return UNCONFIGURED
    data = ship_split(ctx)
    results: Dict[str, EvalResult] = {}
    for source in cfg.classifier_sources():
        model = load_classifier(layout.classifier_path(ctx, source))
        transform = source_transform(ctx, source)
        evaluation = evaluate(model, [transform(im) for im in data.test_images], data.test_labels, data.test_ids)
        results[source] = evaluation
        logging.info(
            f"Classifier '{source}': accuracy {evaluation.accuracy:.4f} on {evaluation.count} chips, "
            f"{len(evaluation.misclassified)} misclassified"
        )
    payload = EVAL_RESULTS.dump_json(results, indent=2).decode("utf-8")
    path = write_text_atomic(payload, layout.results_path(ctx, "classifier.json"))
    return StageResult([path], {s: r.accuracy for s, r in results.items()})
