"""Experiment configuration: a TOML file with one section per stage."""

import hashlib
import json
import tomllib
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.classifier import ClassifierSpec, ClassifierTrainConfig
from app.core.config import settings
from app.core.errors import ConfigError
from app.core.images import NormalizationSpec
from app.core.optim import OptimizerConfig
from app.core.resample import KEYS, MITCHELL, KernelSpec
from app.core.srgan import DiscriminatorSpec, FeatureExtractorSpec, GeneratorSpec, SrganConfig

# Fields that do not change results and are left out of the config hash
NON_SEMANTIC_FIELDS = {"output_dir", "jobs"}

SEED_NAMES = ("split", "srgan", "classifier")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SeedsConfig(_Section):
    split: int
    srgan: int
    classifier: int


class DatasetConfig(_Section):
    scenes: Dict[str, Path] = Field(min_length=1)
    tile: int = Field(default=320, ge=4)
    test_fraction: float = Field(default=0.25, gt=0, lt=1)

    @field_validator("tile")
    @classmethod
    def _divisible(cls, v: int) -> int:
        if v % 4:
            raise ValueError(f"tile must be divisible by 4, got {v}")
        return v


class SrStageConfig(_Section):
    iterations: int = Field(default=200, ge=0)
    batch_size: int = Field(default=16, ge=1)
    preview_every: int = Field(default=0, ge=0)
    checkpoint_every: int = Field(default=50, ge=1)
    generator: GeneratorSpec = GeneratorSpec()
    discriminator: DiscriminatorSpec = DiscriminatorSpec()
    feature_extractor: FeatureExtractorSpec = FeatureExtractorSpec()
    optimizer: OptimizerConfig = OptimizerConfig(kind="adam")
    normalization: NormalizationSpec = NormalizationSpec()
    precision: Optional[Literal["float32", "float64"]] = None
    train_on: List[str] = Field(default_factory=list)

    def srgan_config(self, seed: int, lr_size: int) -> SrganConfig:
        return SrganConfig(
            seed=seed,
            iterations=self.iterations,
            batch_size=self.batch_size,
            lr_size=lr_size,
            generator=self.generator,
            discriminator=self.discriminator,
            feature_extractor=self.feature_extractor,
            optimizer=self.optimizer,
            normalization=self.normalization,
            precision=self.precision or settings.precision,
            preview_every=self.preview_every,
            checkpoint_every=self.checkpoint_every,
        )


class SweepConfig(_Section):
    kernels: List[KernelSpec] = Field(default_factory=list)
    include_baseline: bool = True


class ClassifierStageConfig(_Section):
    data: Path
    test_fraction: float = Field(default=0.2, gt=0, lt=1)
    sources: List[str] = Field(default_factory=lambda: ["raw", "scaled"], min_length=1)
    conv_channels: int = Field(default=64, ge=1)
    latent_channels: int = Field(default=32, ge=1)
    dense_units: int = Field(default=128, ge=1)
    dropout_rate: float = Field(default=0.25, ge=0, lt=1)
    epochs: int = Field(default=100, ge=0)
    batch_size: int = Field(default=32, ge=1)
    validation_split: float = Field(default=0.2, ge=0, lt=1)
    augment: bool = True
    stop_at_accuracy: Optional[float] = Field(default=None, gt=0, le=1)
    optimizer: OptimizerConfig = OptimizerConfig(kind="adadelta")

    @field_validator("sources")
    @classmethod
    def _known_sources(cls, v: List[str]) -> List[str]:
        for source in v:
            if source not in ("raw", "scaled", "sr") and not source.startswith("sr:"):
                raise ValueError(f"unknown classifier source {source!r} (raw, scaled, sr or sr:<model>)")
        return v

    def spec(self, input_size: int) -> ClassifierSpec:
        return ClassifierSpec(
            input_size=input_size,
            conv_channels=self.conv_channels,
            latent_channels=self.latent_channels,
            dense_units=self.dense_units,
            dropout_rate=self.dropout_rate,
        )

    def train_config(self, seed: int) -> ClassifierTrainConfig:
        return ClassifierTrainConfig(
            seed=seed,
            epochs=self.epochs,
            batch_size=self.batch_size,
            validation_split=self.validation_split,
            optimizer=self.optimizer,
            augment=self.augment,
            stop_at_accuracy=self.stop_at_accuracy,
        )


class DetectionConfig(_Section):
    annotations: Path
    detections: Path
    iou_threshold: float = Field(default=0.5, gt=0, le=1)
    interpolation: Literal["all_point", "voc11"] = "all_point"


class ReportConfig(_Section):
    montage_count: int = Field(default=4, ge=1)
    panels: bool = True


class ExperimentConfig(_Section):
    """Validated experiment description shared by every stage."""

    output_dir: Optional[Path] = None
    jobs: int = Field(default=1, ge=1)
    seeds: SeedsConfig
    dataset: DatasetConfig
    degradation: KernelSpec = KEYS
    baseline: KernelSpec = MITCHELL
    srgan: SrStageConfig = SrStageConfig()
    sweep: SweepConfig = SweepConfig()
    classifier: Optional[ClassifierStageConfig] = None
    detection: Optional[DetectionConfig] = None
    report: ReportConfig = ReportConfig()

    @model_validator(mode="after")
    def _check_references(self) -> "ExperimentConfig":
        unknown = set(self.srgan.train_on) - set(self.dataset.scenes)
        if unknown:
            raise ValueError(f"srgan.train_on names unknown datasets {sorted(unknown)}")
        if self.classifier is not None:
            for source in self.classifier.sources:
                if source.startswith("sr:") and source[3:] not in self.sr_models():
                    raise ValueError(f"classifier source {source!r} names no trained SR model")
        return self

    @property
    def lr_size(self) -> int:
        return self.dataset.tile // 4

    def sr_models(self) -> List[str]:
        """Names of the SR models to train, one per land-use dataset."""
        return list(self.srgan.train_on) or sorted(self.dataset.scenes)

    def classifier_sources(self) -> List[str]:
        """Configured classifier sources with ``sr`` expanded to every SR model."""
        if self.classifier is None:
            return []
        sources: List[str] = []
        for source in self.classifier.sources:
            expanded = [f"sr:{m}" for m in self.sr_models()] if source == "sr" else [source]
            sources += [s for s in expanded if s not in sources]
        return sources

    def referenced_paths(self) -> List[Path]:
        paths = list(self.dataset.scenes.values())
        if self.classifier is not None:
            paths.append(self.classifier.data)
        if self.detection is not None:
            paths += [self.detection.annotations, self.detection.detections]
        if self.srgan.feature_extractor.weights_path is not None:
            paths.append(self.srgan.feature_extractor.weights_path)
        return paths


def _resolve(base: Path, value: Union[str, Path]) -> str:
    path = Path(value).expanduser()
    return str(path if path.is_absolute() else (base / path).resolve())


def _resolve_paths(raw: dict, base: Path) -> None:
    dataset = raw.get("dataset", {})
    if isinstance(dataset.get("scenes"), dict):
        dataset["scenes"] = {k: _resolve(base, v) for k, v in dataset["scenes"].items()}
    for section, keys in (("classifier", ("data",)), ("detection", ("annotations", "detections"))):
        if isinstance(raw.get(section), dict):
            for key in keys:
                if key in raw[section]:
                    raw[section][key] = _resolve(base, raw[section][key])
    phi = raw.get("srgan", {}).get("feature_extractor", {})
    if isinstance(phi, dict) and phi.get("weights_path"):
        phi["weights_path"] = _resolve(base, phi["weights_path"])
    if raw.get("output_dir"):
        raw["output_dir"] = _resolve(base, raw["output_dir"])


def load_config(
    path: Union[str, Path],
    seed_override: Optional[int] = None,
    output_dir: Optional[Union[str, Path]] = None,
    jobs: Optional[int] = None,
) -> ExperimentConfig:
    """Read, validate and resolve an experiment config.

    Relative paths in the file are resolved against the file's directory.
    ``seed_override`` replaces every named seed.

    Raises:
        ConfigError: If the file cannot be read or parsed, fails validation,
            or references paths that do not exist
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Config {path} is not valid TOML: {e}") from e

    if seed_override is not None:
        raw["seeds"] = {name: seed_override for name in SEED_NAMES}
    _resolve_paths(raw, path.resolve().parent)
    if output_dir is not None:
        raw["output_dir"] = str(Path(output_dir).expanduser().resolve())
    if jobs is not None:
        raw["jobs"] = jobs

    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}:\n{e}") from e

    missing = [str(p) for p in config.referenced_paths() if not p.exists()]
    if missing:
        raise ConfigError(f"Config {path} references missing paths: {', '.join(missing)}")
    if config.output_dir is None:
        config.output_dir = (settings.output_root / path.stem).resolve()
    return config


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON of every semantically meaningful field."""
    payload = config.model_dump(mode="json", exclude=NON_SEMANTIC_FIELDS)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
