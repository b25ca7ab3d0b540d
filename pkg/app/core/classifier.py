"""Binary ship / no-ship CNN with 80 px and 320 px input paths.

Both paths end in the same (32, 38, 38) latent block:

* 80 px: conv64 3x3 valid (78) -> pool (39) -> conv32 2x2 valid (38)
* 320 px: two same-padded conv64 + pool stages (320 -> 160 -> 80), then the 80 px plan
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.augment import AugmentParams, augment
from app.core.checkpoint import CLASSIFIER_MAGIC, graph_entries, read_container, restore_graph, write_container
from app.core.errors import DatasetError, ShapeError
from app.core.graph import ModelGraph, apply_state_updates, backward, forward
from app.core.images import ImageTensor, NormalizationSpec, normalize
from app.core.layers import activation, conv2d, dense, dropout, flatten, max_pool2d
from app.core.losses import loss_and_grad
from app.core.optim import OptimizerConfig, OptimizerState, optimizer_step
from app.core.tiling import split

logger = logging.getLogger(__name__)

LATENT_SIZE = 38
LATENT_NODE = "c_latent"


class ClassifierSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    input_size: Literal[80, 320] = 80
    conv_channels: int = Field(default=64, ge=1)
    latent_channels: int = Field(default=32, ge=1)
    dense_units: int = Field(default=128, ge=1)
    dropout_rate: float = Field(default=0.25, ge=0, lt=1)
    classes: int = Field(default=2, ge=2)


@dataclass
class ClassifierModel:
    spec: ClassifierSpec
    graph: ModelGraph

    @property
    def latent_shape(self) -> Tuple[int, ...]:
        return self.graph.shapes[[l.name for l in self.graph.layers].index(LATENT_NODE)]

    def copy(self) -> "ClassifierModel":
        g = self.graph
        return ClassifierModel(self.spec, ModelGraph(g.name, g.input_shape, g.layers, g.output, g.params.copy()))


def build(spec: ClassifierSpec, seed: int = 0, dtype=np.float32) -> ClassifierModel:
    """Build and initialize the classifier graph.

    Raises:
        ShapeError: If the layer plan does not reach the 38x38 latent block
    """
    n = spec.conv_channels
    layers = []
    if spec.input_size == 320:
        layers += [
            conv2d("c_stem1_conv", 3, n), activation("c_stem1_relu", "relu"), max_pool2d("c_stem1_pool", 2),
            conv2d("c_stem2_conv", 3, n), activation("c_stem2_relu", "relu"), max_pool2d("c_stem2_pool", 2),
        ]
    layers += [
        conv2d("c_conv1", 3, n, padding="valid"),
        activation("c_relu1", "relu"),
        max_pool2d("c_pool1", 2),
        conv2d("c_conv2", 2, spec.latent_channels, padding="valid"),
        activation(LATENT_NODE, "relu"),
        dropout("c_drop1", spec.dropout_rate),
        flatten("c_flatten"),
        dense("c_dense1", spec.dense_units),
        activation("c_relu_dense", "relu"),
        dropout("c_drop2", spec.dropout_rate),
        dense("c_logits", spec.classes),
        activation("c_softmax", "softmax"),
    ]
    graph = ModelGraph(f"classifier_{spec.input_size}", (3, spec.input_size, spec.input_size), layers)
    model = ClassifierModel(spec, graph)
    expected = (spec.latent_channels, LATENT_SIZE, LATENT_SIZE)
    if model.latent_shape != expected:
        raise ShapeError(f"Classifier plan reaches latent {model.latent_shape}, expected {expected}")
    graph.init_params(seed, dtype)
    logger.info(f"Built {graph.name}: latent {model.latent_shape}, {graph.num_parameters():,} parameters")
    return model


class ClassifierTrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int
    epochs: int = Field(default=100, ge=0)
    batch_size: int = Field(default=32, ge=1)
    validation_split: float = Field(default=0.2, ge=0, lt=1)
    optimizer: OptimizerConfig = OptimizerConfig(kind="adadelta")
    augment: bool = True
    augment_params: AugmentParams = AugmentParams()
    stop_at_accuracy: Optional[float] = Field(default=None, gt=0, le=1)


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: Optional[float] = None


class EvalResult(BaseModel):
    accuracy: float
    confusion: List[List[int]]
    misclassified: List[str] = Field(default_factory=list)

    @property
    def count(self) -> int:
        return sum(sum(row) for row in self.confusion)


def _as_unit(images: Sequence[ImageTensor]) -> np.ndarray:
    unit = NormalizationSpec(mode="unit")
    return np.stack([im.data if im.convention == "unit" else normalize(im, unit).data for im in images])


def _check_size(model: ClassifierModel, batch: np.ndarray) -> None:
    if batch.shape[1:] != model.graph.input_shape:
        raise ShapeError(f"{model.graph.name} expects {model.graph.input_shape}, got {batch.shape[1:]}")


def predict_proba(model: ClassifierModel, images: Sequence[ImageTensor], batch_size: int = 64) -> np.ndarray:
    """Eval-mode class probabilities, shape (N, classes)."""
    x = _as_unit(images)
    _check_size(model, x)
    outputs = []
    for start in range(0, len(x), batch_size):
        out, _ = forward(model.graph, x[start:start + batch_size], mode="eval")
        outputs.append(out.data)
    return np.concatenate(outputs)


def predict(model: ClassifierModel, images: Sequence[ImageTensor]) -> np.ndarray:
    return predict_proba(model, images).argmax(axis=1)


def _sample_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.default_rng([seed, epoch, index]).integers(2**31))


def train(
    model: ClassifierModel,
    images: Sequence[ImageTensor],
    labels: Sequence[int],
    config: ClassifierTrainConfig,
) -> Tuple[ClassifierModel, List[EpochRecord]]:
    """Minimize categorical cross-entropy with on-the-fly augmentation.

    ``train_acc`` is the eval-mode accuracy on the unaugmented training
    partition at the end of each epoch.

    Args:
        model: Classifier to train (left untouched; a trained copy is returned)
        images: Chips in byte or unit convention
        labels: Class index per image
        config: Training configuration

    Returns:
        The trained copy and the per-epoch history

    Raises:
        DatasetError: If the labels contain a single class or the split leaves
            an empty partition
    """
    labels = [int(v) for v in labels]
    if len(set(labels)) < 2:
        raise DatasetError("Classifier training needs examples of at least two classes")
    if len(images) != len(labels):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")

    trained = model.copy()
    graph = trained.graph
    x_all = _as_unit(images).astype(graph.params.array(graph.params.names()[0]).dtype)
    _check_size(trained, x_all)
    classes = trained.spec.classes
    onehot = np.eye(classes, dtype=x_all.dtype)[labels]

    indices = list(range(len(labels)))
    if config.validation_split > 0:
        parts = split(indices, (1 - config.validation_split, config.validation_split), config.seed,
                      [str(v) for v in labels])
        train_idx, val_idx = parts.partitions
    else:
        train_idx, val_idx = indices, []

    state = OptimizerState.create(config.optimizer, graph.params)
    history: List[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(train_idx)
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start:start + config.batch_size]
            if config.augment:
                xb = np.stack([
                    augment(ImageTensor(x_all[i], "unit"), _sample_seed(config.seed, epoch, int(i)),
                            config.augment_params).data
                    for i in batch
                ]).astype(x_all.dtype)
            else:
                xb = x_all[batch]
            out, tape = forward(graph, xb, mode="train", rng_seed=_sample_seed(config.seed, epoch, -1 - b))
            value, grad = loss_and_grad("cce", out, onehot[batch])
            optimizer_step(state, graph.params, backward(tape, grad))
            apply_state_updates(graph, tape)
            losses.append(value)

        train_acc = _accuracy(trained, x_all[train_idx], np.asarray(labels)[train_idx])
        val_acc = _accuracy(trained, x_all[val_idx], np.asarray(labels)[val_idx]) if val_idx else None
        record = EpochRecord(epoch=epoch, train_loss=float(np.mean(losses)), train_acc=train_acc, val_acc=val_acc)
        history.append(record)
        logger.info(
            f"epoch {epoch}: loss {record.train_loss:.4f} train_acc {train_acc:.4f}"
            + (f" val_acc {val_acc:.4f}" if val_acc is not None else "")
        )
        if config.stop_at_accuracy is not None and train_acc >= config.stop_at_accuracy:
            logger.info(f"Stopping at epoch {epoch}: train accuracy {train_acc:.4f}")
            break
    return trained, history


def _accuracy(model: ClassifierModel, x: np.ndarray, labels: np.ndarray) -> float:
    preds = []
    for start in range(0, len(x), 64):
        out, _ = forward(model.graph, x[start:start + 64], mode="eval")
        preds.append(out.data.argmax(axis=1))
    return float(np.mean(np.concatenate(preds) == labels))


def evaluate_predictions(
    predictions: Sequence[int],
    labels: Sequence[int],
    ids: Optional[Sequence[str]] = None,
    classes: int = 2,
) -> EvalResult:
    """Accuracy, confusion matrix (rows = true class) and misclassified ids."""
    ids = list(ids) if ids is not None else [str(i) for i in range(len(labels))]
    confusion = [[0] * classes for _ in range(classes)]
    wrong = []
    for pred, true, image_id in zip(predictions, labels, ids):
        confusion[int(true)][int(pred)] += 1
        if int(pred) != int(true):
            wrong.append(image_id)
    n = len(labels)
    correct = sum(confusion[i][i] for i in range(classes))
    return EvalResult(accuracy=correct / n if n else 0.0, confusion=confusion, misclassified=wrong)


def evaluate(
    model: ClassifierModel,
    images: Sequence[ImageTensor],
    labels: Sequence[int],
    ids: Optional[Sequence[str]] = None,
) -> EvalResult:
    """Argmax predictions of an eval-mode pass, without augmentation.

    Raises:
        ShapeError: If the images do not match the model's input size
    """
    return evaluate_predictions(predict(model, images), labels, ids, model.spec.classes)


def write_history(history: Sequence[EpochRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_acc", "val_acc", "train_loss"])
        for r in history:
            writer.writerow([
                r.epoch, f"{r.train_acc:.6f}",
                "" if r.val_acc is None else f"{r.val_acc:.6f}", f"{r.train_loss:.6f}",
            ])
    return path


def save_classifier(model: ClassifierModel, path: Union[str, Path]) -> Path:
    meta, tensors = graph_entries("classifier", model.graph)
    return write_container(path, CLASSIFIER_MAGIC, {"spec": model.spec.model_dump(), "graph": meta}, tensors)


def load_classifier(path: Union[str, Path]) -> ClassifierModel:
    meta, tensors = read_container(path, CLASSIFIER_MAGIC)
    return ClassifierModel(ClassifierSpec.model_validate(meta["spec"]), restore_graph("classifier", meta["graph"], tensors))
