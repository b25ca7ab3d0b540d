"""SRGAN generator, discriminator, perceptual loss and adversarial training.

The generator maps a 3xhxw image in [-1, 1] to 3x4hx4w through residual
blocks and two pixel-shuffle stages. The discriminator is a strided conv
ladder ending in a sigmoid. Content loss compares activations of a fixed,
seeded convolutional feature extractor (φ); the generator objective is
``content + 1e-3 * adversarial`` with the adversarial term averaged over
the batch.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.checkpoint import (
    SR_MAGIC,
    graph_entries,
    load_feature_weights,
    optimizer_entries,
    read_container,
    restore_graph,
    restore_optimizer,
    write_container,
)
from app.core.errors import DatasetError, LossDomainError, NonFiniteError, ShapeError, TrainingDivergedError
from app.core.graph import ModelGraph, apply_state_updates, backward, compare_gradients, forward
from app.core.images import ImageTensor, NormalizationSpec, denormalize, normalize
from app.core.layers import activation, add, batch_norm, conv2d, dense, flatten, pixel_shuffle_layer
from app.core.losses import CLAMP, check_probabilities, loss_and_grad
from app.core.optim import OptimizerConfig, OptimizerState, optimizer_step
from app.core.tensor import ArrayLike, as_array
from app.core.tiling import PairedDataset

logger = logging.getLogger(__name__)

ADVERSARIAL_WEIGHT = 1e-3


class GeneratorSpec(BaseModel):
    """Residual generator; the full-size network uses 16 blocks of 64 channels."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    residual_blocks: int = Field(default=4, ge=1)
    base_channels: int = Field(default=16, ge=1)
    upsample_stages: Literal[2] = 2


class DiscriminatorSpec(BaseModel):
    """Conv ladder b, b, 2b, 2b, 4b, 4b, 8b, 8b (full size: b = 64, dense 1024)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    base_channels: int = Field(default=8, ge=1)
    dense_units: int = Field(default=64, ge=1)
    alpha: float = Field(default=0.2, gt=0, lt=1)


class FeatureExtractorSpec(BaseModel):
    """Fixed φ: four 3x3 convs (s1, s2, s1, s2) with tanh, tapped after ``tap_layer``."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    channels: Tuple[int, int] = (8, 16)
    tap_layer: int = Field(default=4, ge=1, le=4)
    seed: int = 1234
    weights_path: Optional[Path] = None


def build_generator(spec: GeneratorSpec, lr_size: int = 80) -> ModelGraph:
    b = spec.base_channels
    layers = [conv2d("g_conv_in", 9, b), activation("g_prelu_in", "prelu")]
    prev = "g_prelu_in"
    for i in range(1, spec.residual_blocks + 1):
        p = f"g_res{i}"
        # convs feeding batch norm carry no bias; BN's shift replaces it
        layers += [
            conv2d(f"{p}_conv1", 3, b, use_bias=False, inputs=[prev]),
            batch_norm(f"{p}_bn1"),
            activation(f"{p}_prelu", "prelu"),
            conv2d(f"{p}_conv2", 3, b, use_bias=False),
            batch_norm(f"{p}_bn2"),
            add(f"{p}_add", prev, f"{p}_bn2"),
        ]
        prev = f"{p}_add"
    layers += [
        conv2d("g_conv_mid", 3, b, use_bias=False, inputs=[prev]),
        batch_norm("g_bn_mid"),
        add("g_skip", "g_prelu_in", "g_bn_mid"),
    ]
    for i in range(1, spec.upsample_stages + 1):
        layers += [
            conv2d(f"g_up{i}_conv", 3, b * 4),
            pixel_shuffle_layer(f"g_up{i}_shuffle", 2),
            activation(f"g_up{i}_prelu", "prelu"),
        ]
    layers += [conv2d("g_conv_out", 9, 3), activation("g_tanh", "tanh")]
    return ModelGraph("generator", (3, lr_size, lr_size), layers)


def build_discriminator(spec: DiscriminatorSpec, hr_size: int = 320) -> ModelGraph:
    b, alpha = spec.base_channels, spec.alpha
    layers = [conv2d("d_conv1", 3, b), activation("d_act1", "leaky_relu", alpha)]
    ladder = [(b, 2), (2 * b, 1), (2 * b, 2), (4 * b, 1), (4 * b, 2), (8 * b, 1), (8 * b, 2)]
    for i, (n, s) in enumerate(ladder, start=2):
        layers += [
            conv2d(f"d_conv{i}", 3, n, s, use_bias=False),
            batch_norm(f"d_bn{i}"),
            activation(f"d_act{i}", "leaky_relu", alpha),
        ]
    layers += [
        flatten("d_flatten"),
        dense("d_dense1", spec.dense_units),
        activation("d_act_dense", "leaky_relu", alpha),
        dense("d_dense2", 1),
        activation("d_sigmoid", "sigmoid"),
    ]
    return ModelGraph("discriminator", (3, hr_size, hr_size), layers)


def build_feature_graph(spec: FeatureExtractorSpec, image_size: int = 320) -> ModelGraph:
    c1, c2 = spec.channels
    plan = [(c1, 1), (c1, 2), (c2, 1), (c2, 2)]
    layers = []
    for i, (n, s) in enumerate(plan[: spec.tap_layer], start=1):
        layers += [conv2d(f"phi_conv{i}", 3, n, s), activation(f"phi_tanh{i}", "tanh")]
    return ModelGraph("feature_extractor", (3, image_size, image_size), layers)


class FeatureExtractor:
    """Frozen feature network whose tap activations define the content loss."""

    def __init__(self, graph: ModelGraph) -> None:
        frozen = graph.params.freeze()
        for _, tensor in frozen.items():
            tensor.data.setflags(write=False)
        graph.params = frozen
        self.graph = graph

    @classmethod
    def from_spec(cls, spec: FeatureExtractorSpec, image_size: int = 320, dtype=np.float32) -> "FeatureExtractor":
        graph = build_feature_graph(spec, image_size)
        if spec.weights_path is not None:
            loaded = load_feature_weights(spec.weights_path)
            graph = ModelGraph(graph.name, graph.input_shape, graph.layers, params=loaded.astype(dtype))
            logger.info(f"Loaded feature extractor weights from {spec.weights_path}")
        else:
            graph.init_params(spec.seed, dtype=dtype, trainable=False)
        return cls(graph)

    @property
    def tap(self) -> str:
        return self.graph.output

    def features(self, x: ArrayLike) -> np.ndarray:
        out, _ = forward(self.graph, x, mode="eval")
        return out.data

    def loss_and_grad(self, hr: ArrayLike, sr: ArrayLike) -> Tuple[float, np.ndarray]:
        """Mean squared feature difference and its gradient w.r.t. ``sr``."""
        hr_arr, sr_arr = as_array(hr), as_array(sr)
        if hr_arr.shape != sr_arr.shape:
            raise ShapeError(f"HR shape {hr_arr.shape} != SR shape {sr_arr.shape}")
        f_hr = self.features(hr_arr)
        f_sr, tape = forward(self.graph, sr_arr, mode="train")
        diff = f_sr.data.astype(np.float64) - f_hr.astype(np.float64)
        value = float(np.mean(diff * diff))
        grads = backward(tape, 2.0 * diff / diff.size)
        return value, grads["input"].astype(sr_arr.dtype if sr_arr.dtype.kind == "f" else np.float64)


def _batched(x: Union[ArrayLike, ImageTensor]) -> np.ndarray:
    arr = x.data if isinstance(x, ImageTensor) else as_array(x)
    return arr[None] if arr.ndim == 3 else arr


def adversarial_loss_and_grad(d_out: ArrayLike) -> Tuple[float, np.ndarray]:
    """Mean over the batch of -log D(G(lr)), with its gradient."""
    d = as_array(d_out)
    check_probabilities(d, "discriminator output")
    dc = np.clip(d.astype(np.float64), CLAMP, 1 - CLAMP)
    value = float(np.mean(-np.log(dc)))
    grad = np.where(dc == d, -1.0 / (dc * d.size), 0.0)
    return value, grad.astype(d.dtype if d.dtype.kind == "f" else np.float64)


def adversarial_loss(d_out: ArrayLike) -> float:
    return adversarial_loss_and_grad(d_out)[0]


def content_loss(hr: Union[ArrayLike, ImageTensor], sr: Union[ArrayLike, ImageTensor], phi: FeatureExtractor) -> float:
    """Squared φ-feature difference averaged over positions, channels and batch."""
    value, _ = phi.loss_and_grad(_batched(hr), _batched(sr))
    return value


def generator_loss(hr, sr, d_out: ArrayLike, phi: FeatureExtractor) -> float:
    """content_loss + 1e-3 * adversarial_loss."""
    return content_loss(hr, sr, phi) + ADVERSARIAL_WEIGHT * adversarial_loss(d_out)


def discriminator_loss(d_real: ArrayLike, d_fake: ArrayLike) -> float:
    """Binary cross-entropy with targets 1 (real) and 0 (fake), averaged over both halves."""
    real, fake = as_array(d_real), as_array(d_fake)
    prediction = np.concatenate([real.ravel(), fake.ravel()])
    target = np.concatenate([np.ones(real.size), np.zeros(fake.size)])
    return loss_and_grad("bce", prediction, target)[0]


class SrganConfig(BaseModel):
    """Training configuration for one SRGAN."""

    model_config = ConfigDict(extra="forbid")

    seed: int
    iterations: int = Field(default=200, ge=0)
    batch_size: int = Field(default=16, ge=1)
    lr_size: int = Field(default=80, ge=4)
    generator: GeneratorSpec = GeneratorSpec()
    discriminator: DiscriminatorSpec = DiscriminatorSpec()
    feature_extractor: FeatureExtractorSpec = FeatureExtractorSpec()
    optimizer: OptimizerConfig = OptimizerConfig(kind="adam")
    normalization: NormalizationSpec = NormalizationSpec()
    precision: Literal["float32", "float64"] = "float32"
    preview_every: int = Field(default=0, ge=0)
    checkpoint_every: int = Field(default=50, ge=1)

    @property
    def hr_size(self) -> int:
        return self.lr_size * 4


@dataclass
class SrCheckpoint:
    """Complete training state: both networks, both optimizers and the position."""

    config: SrganConfig
    generator: ModelGraph
    discriminator: ModelGraph
    g_state: OptimizerState
    d_state: OptimizerState
    iteration: int = 0
    rng_state: Dict[str, Any] = field(default_factory=dict)
    data_key: str = ""

    def copy(self) -> "SrCheckpoint":
        return SrCheckpoint(
            self.config.model_copy(deep=True),
            _copy_graph(self.generator),
            _copy_graph(self.discriminator),
            self.g_state.copy(),
            self.d_state.copy(),
            self.iteration,
            dict(self.rng_state),
            self.data_key,
        )


def _copy_graph(graph: ModelGraph) -> ModelGraph:
    return ModelGraph(graph.name, graph.input_shape, graph.layers, graph.output, graph.params.copy())


class LossRecord(BaseModel):
    iteration: int
    d_loss: float
    g_loss: float
    content: float
    adversarial: float

    def to_line(self) -> str:
        return (
            f"{self.iteration},{self.d_loss:.9g},{self.g_loss:.9g},"
            f"{self.content:.9g},{self.adversarial:.9g}"
        )


LOSS_LOG_HEADER = "iter,d_loss,g_loss,content,adversarial"


@dataclass
class TrainResult:
    checkpoint: SrCheckpoint
    history: List[LossRecord]
    previews: List[Tuple[int, ImageTensor]] = field(default_factory=list)


def init_checkpoint(config: SrganConfig) -> SrCheckpoint:
    """Fresh networks and optimizer states from the config seed."""
    dtype = np.dtype(config.precision)
    generator = build_generator(config.generator, config.lr_size)
    generator.init_params(config.seed, dtype)
    discriminator = build_discriminator(config.discriminator, config.hr_size)
    discriminator.init_params(config.seed + 1, dtype)
    return SrCheckpoint(
        config=config,
        generator=generator,
        discriminator=discriminator,
        g_state=OptimizerState.create(config.optimizer, generator.params),
        d_state=OptimizerState.create(config.optimizer, discriminator.params),
        rng_state={"scheme": "per_iteration", "seed": config.seed, "next_iteration": 1},
    )


def batch_indices(seed: int, iteration: int, count: int, batch_size: int) -> np.ndarray:
    """Sample indices for one iteration, a pure function of (seed, iteration)."""
    rng = np.random.default_rng([seed, iteration])
    return np.sort(rng.choice(count, size=min(batch_size, count), replace=False))


def train_step(
    ckpt: SrCheckpoint, phi: FeatureExtractor, lr: np.ndarray, hr: np.ndarray, iteration: int
) -> LossRecord:
    """One discriminator update on (hr, G(lr)) followed by one generator update."""
    G, D = ckpt.generator, ckpt.discriminator
    n = lr.shape[0]

    sr, g_tape = forward(G, lr, mode="train", rng_seed=iteration)

    d_out, d_tape = forward(D, np.concatenate([hr, sr.data]), mode="train", rng_seed=iteration)
    target = np.concatenate([np.ones((n, 1)), np.zeros((n, 1))]).astype(d_out.dtype)
    d_loss, d_grad = loss_and_grad("bce", d_out, target)
    optimizer_step(ckpt.d_state, D.params, backward(d_tape, d_grad))
    apply_state_updates(D, d_tape)

    # D runs in train mode only to route gradients; its statistics are not committed here
    d_fake, fake_tape = forward(D, sr.data, mode="train", rng_seed=iteration)
    adversarial, adv_grad = adversarial_loss_and_grad(d_fake.data)
    adv_input_grad = backward(fake_tape, adv_grad)["input"]
    content, content_grad = phi.loss_and_grad(hr, sr.data)
    sr_grad = content_grad + ADVERSARIAL_WEIGHT * adv_input_grad
    optimizer_step(ckpt.g_state, G.params, backward(g_tape, sr_grad))
    apply_state_updates(G, g_tape)

    return LossRecord(
        iteration=iteration,
        d_loss=d_loss,
        g_loss=content + ADVERSARIAL_WEIGHT * adversarial,
        content=content,
        adversarial=adversarial,
    )


def _stack(images: List[ImageTensor], spec: NormalizationSpec, dtype) -> np.ndarray:
    return np.stack([normalize(im, spec).data for im in images]).astype(dtype)


def train(
    pairs: PairedDataset,
    config: SrganConfig,
    resume: Optional[SrCheckpoint] = None,
    loss_log: Optional[Union[str, Path]] = None,
    on_iteration: Optional[Callable[[LossRecord], None]] = None,
) -> TrainResult:
    """Adversarial training, alternating one D step and one G step per iteration.

    Args:
        pairs: HR/LR chips in byte convention
        config: Training configuration; ``iterations`` is the total count
        resume: Checkpoint to continue from (its iteration counter is kept)
        loss_log: File receiving one CSV line per iteration (appended)
        on_iteration: Callback receiving each loss record

    Returns:
        Final checkpoint, per-iteration losses and optional previews

    Raises:
        DatasetError: If there are no pairs, or ``resume`` was trained on
            different pairs
        TrainingDivergedError: On a non-finite loss, carrying the iteration
            and the most recent periodic snapshot
    """
    if len(pairs) == 0:
        raise DatasetError("SRGAN training needs at least one pair")
    data_key = pairs.fingerprint()
    if resume is not None and resume.data_key and resume.data_key != data_key:
        raise DatasetError("Checkpoint was trained on different pairs; start a fresh run instead of resuming")
    ckpt = resume.copy() if resume is not None else init_checkpoint(config)
    ckpt.data_key = data_key
    dtype = np.dtype(config.precision)
    phi = FeatureExtractor.from_spec(config.feature_extractor, config.hr_size, dtype)

    lr_all = _stack(pairs.lr, config.normalization, dtype)
    hr_all = _stack(pairs.hr, config.normalization, dtype)
    if lr_all.shape[2:] != (config.lr_size, config.lr_size):
        raise ShapeError(f"LR chips are {lr_all.shape[2:]}, config expects {config.lr_size}px")

    log_file = None
    if loss_log is not None:
        loss_log = Path(loss_log)
        loss_log.parent.mkdir(parents=True, exist_ok=True)
        is_new = not loss_log.exists() or loss_log.stat().st_size == 0
        log_file = loss_log.open("a", encoding="utf-8")
        if is_new:
            log_file.write(LOSS_LOG_HEADER + "\n")

    history: List[LossRecord] = []
    previews: List[Tuple[int, ImageTensor]] = []
    snapshot = ckpt.copy()
    preview_lr = normalize(pairs.lr[0], config.normalization)
    try:
        for it in range(ckpt.iteration + 1, config.iterations + 1):
            idx = batch_indices(config.seed, it, len(pairs), config.batch_size)
            try:
                record = train_step(ckpt, phi, lr_all[idx], hr_all[idx], it)
            except (NonFiniteError, LossDomainError) as e:
                raise TrainingDivergedError(it, snapshot) from e
            if not all(math.isfinite(v) for v in (record.d_loss, record.g_loss)):
                raise TrainingDivergedError(it, snapshot)

            ckpt.iteration = it
            ckpt.rng_state = {"scheme": "per_iteration", "seed": config.seed, "next_iteration": it + 1}
            history.append(record)
            if log_file is not None:
                log_file.write(record.to_line() + "\n")
            if on_iteration is not None:
                on_iteration(record)
            if it % config.checkpoint_every == 0:
                snapshot = ckpt.copy()
            if config.preview_every and it % config.preview_every == 0:
                previews.append((it, super_resolve(ckpt, preview_lr)))
            if it == 1 or it % 10 == 0:
                logger.info(
                    f"iter {it}: d_loss {record.d_loss:.4f} g_loss {record.g_loss:.4f} "
                    f"content {record.content:.4f} adversarial {record.adversarial:.4f}"
                )
    finally:
        if log_file is not None:
            log_file.close()

    return TrainResult(ckpt, history, previews)


def super_resolve(ckpt: SrCheckpoint, lr: ImageTensor) -> ImageTensor:
    """Eval-mode generator pass on one normalized LR image.

    Raises:
        ShapeError: If the image is not 3-channel
        ValueError: If the image is in byte convention or outside its range
    """
    if lr.channels != 3:
        raise ShapeError(f"Generator expects 3 channels, got {lr.channels}")
    if lr.convention == "byte":
        raise ValueError("super_resolve expects a normalized image, got byte convention")
    lo, hi = lr.value_range
    if lr.data.min() < lo - 1e-6 or lr.data.max() > hi + 1e-6:
        raise ValueError(f"LR values outside [{lo}, {hi}]")
    out, _ = forward(ckpt.generator, lr.data[None], mode="eval")
    convention = "mean_centered" if lr.convention == "mean_centered" else "signed_unit"
    return lr.derive(out.data[0], convention, model="srgan", iteration=ckpt.iteration)


def as_sr_model(ckpt: SrCheckpoint, spec: Optional[NormalizationSpec] = None) -> Callable[[ImageTensor], ImageTensor]:
    """Wrap a checkpoint as a byte-in, byte-out super-resolution callable."""
    spec = spec or ckpt.config.normalization

    def model(lr: ImageTensor) -> ImageTensor:
        return denormalize(super_resolve(ckpt, normalize(lr, spec)))

    return model


def objective_grad_check(
    generator: ModelGraph,
    discriminator: ModelGraph,
    phi: FeatureExtractor,
    lr: ArrayLike,
    hr: ArrayLike,
    eps: float = 1e-5,
    max_entries: Optional[int] = 8,
    seed: int = 0,
) -> float:
    """Finite-difference check of the full generator objective w.r.t. the generator's parameters.

    All three networks must hold float64 parameters. Activation routing of the
    reference pass is held fixed in both networks.
    """
    lr_arr, hr_arr = as_array(lr).astype(np.float64), as_array(hr).astype(np.float64)
    sr, g_tape = forward(generator, lr_arr, mode="train")
    d_fake, d_tape = forward(discriminator, sr.data, mode="train")
    _, adv_grad = adversarial_loss_and_grad(d_fake.data)
    _, content_grad = phi.loss_and_grad(hr_arr, sr.data)
    sr_grad = content_grad + ADVERSARIAL_WEIGHT * backward(d_tape, adv_grad)["input"]
    analytic = backward(g_tape, sr_grad)

    def objective() -> float:
        s, _ = forward(generator, lr_arr, mode="train", routing=g_tape)
        d, _ = forward(discriminator, s.data, mode="train", routing=d_tape)
        return generator_loss(hr_arr, s.data, d.data, phi)

    arrays = {name: generator.params.array(name) for name in generator.params.trainable()}
    return compare_gradients(objective, arrays, analytic, eps, max_entries, seed)


def save_checkpoint(ckpt: SrCheckpoint, path: Union[str, Path]) -> Path:
    g_meta, g_tensors = graph_entries("generator", ckpt.generator)
    d_meta, d_tensors = graph_entries("discriminator", ckpt.discriminator)
    go_meta, go_tensors = optimizer_entries("g_opt", ckpt.g_state)
    do_meta, do_tensors = optimizer_entries("d_opt", ckpt.d_state)
    metadata = {
        "kind": "srgan",
        "config": ckpt.config.model_dump(mode="json"),
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "data_key": ckpt.data_key,
        "generator": g_meta,
        "discriminator": d_meta,
        "g_opt": go_meta,
        "d_opt": do_meta,
    }
    return write_container(path, SR_MAGIC, metadata, {**g_tensors, **d_tensors, **go_tensors, **do_tensors})


def load_checkpoint(path: Union[str, Path]) -> SrCheckpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        CheckpointCorruptError: Wrong magic, bad checksum or missing tensors
        CheckpointVersionError: Incompatible format version
    """
    meta, tensors = read_container(path, SR_MAGIC)
    return SrCheckpoint(
        config=SrganConfig.model_validate(meta["config"]),
        generator=restore_graph("generator", meta["generator"], tensors),
        discriminator=restore_graph("discriminator", meta["discriminator"], tensors),
        g_state=restore_optimizer("g_opt", meta["g_opt"], tensors),
        d_state=restore_optimizer("d_opt", meta["d_opt"], tensors),
        iteration=meta["iteration"],
        rng_state=meta["rng_state"],
        data_key=meta.get("data_key", ""),
    )


def checkpoints_equal(a: SrCheckpoint, b: SrCheckpoint) -> bool:
    """Bit-exact comparison of parameters, optimizer slots and position."""
    def slots_equal(x: OptimizerState, y: OptimizerState) -> bool:
        if x.step != y.step or x.slots.keys() != y.slots.keys():
            return False
        return all(
            np.array_equal(x.slots[n][s], y.slots[n][s]) and x.slots[n][s].dtype == y.slots[n][s].dtype
            for n in x.slots for s in x.slots[n]
        )

    return (
        a.iteration == b.iteration
        and a.generator.params.equals(b.generator.params)
        and a.discriminator.params.equals(b.discriminator.params)
        and slots_equal(a.g_state, b.g_state)
        and slots_equal(a.d_state, b.d_state)
    )
