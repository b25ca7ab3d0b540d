from pathlib import Path

import pytest

from app.core.config import settings
from app.core.errors import ConfigError
from app.workflows.experiment import (
    ClassifierStageConfig,
    DatasetConfig,
    ExperimentConfig,
    SeedsConfig,
    config_hash,
    load_config,
)

RELATIVE_PATHS = ("scenes/", "ships\"", "annotations\"", "detections.csv\"")


def variant(mini_dataset: Path, tmp_path: Path, old: str = "", new: str = "") -> Path:
    """Copy of the mini-dataset config with absolute data paths and one text replacement."""
    text = mini_dataset.read_text()
    root = mini_dataset.parent.resolve().as_posix()
    for rel in RELATIVE_PATHS:
        text = text.replace(f'"{rel}', f'"{root}/{rel}')
    if old:
        assert old in text
        text = text.replace(old, new)
    path = tmp_path / "variant.toml"
    path.write_text(text)
    return path


class TestLoadConfig:
    def test_mini_dataset(self, mini_dataset):
        config = load_config(mini_dataset)
        assert config.seeds == SeedsConfig(split=0, srgan=1, classifier=2)
        assert config.lr_size == 80
        assert sorted(config.dataset.scenes) == ["agricultural", "industrial"]
        assert all(p.is_absolute() and p.exists() for p in config.dataset.scenes.values())
        assert config.degradation.label() != config.baseline.label()
        assert config.output_dir == (settings.output_root / "experiment").resolve()

    def test_sources_expand_to_every_sr_model(self, mini_dataset):
        config = load_config(mini_dataset)
        assert config.sr_models() == ["agricultural", "industrial"]
        assert config.classifier_sources() == ["raw", "scaled", "sr:agricultural", "sr:industrial"]

    def test_seed_override_replaces_every_seed(self, mini_dataset):
        config = load_config(mini_dataset, seed_override=9)
        assert config.seeds == SeedsConfig(split=9, srgan=9, classifier=9)
        assert config_hash(config) != config_hash(load_config(mini_dataset))

    def test_hash_ignores_output_and_jobs(self, mini_dataset, tmp_path):
        a = load_config(mini_dataset)
        b = load_config(mini_dataset, output_dir=tmp_path / "elsewhere", jobs=4)
        assert b.jobs == 4
        assert b.output_dir == (tmp_path / "elsewhere").resolve()
        assert config_hash(a) == config_hash(b)
        assert len(config_hash(a)) == 64

    def test_absolute_paths_load_from_anywhere(self, mini_dataset, tmp_path):
        config = load_config(variant(mini_dataset, tmp_path))
        assert config_hash(config) == config_hash(load_config(mini_dataset))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.toml")

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("[seeds\nsplit = 1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    @pytest.mark.parametrize(
        "old,new",
        [
            ("tile = 320", "tile = 322"),
            ("tile = 320", "tile = 320\ncolour = true"),
            ("split = 0", "split = \"zero\""),
            ('sources = ["raw", "scaled", "sr"]', 'sources = ["raw", "sr:harbour"]'),
            ('sources = ["raw", "scaled", "sr"]', 'sources = ["thermal"]'),
            ("iou_threshold = 0.5", "iou_threshold = 0"),
            ("[srgan]\n", "[srgan]\ntrain_on = [\"urban\"]\n"),
        ],
    )
    def test_invalid_values(self, mini_dataset, tmp_path, old, new):
        with pytest.raises(ConfigError):
            load_config(variant(mini_dataset, tmp_path, old, new))

    def test_missing_data_path(self, mini_dataset, tmp_path):
        path = variant(mini_dataset, tmp_path, "detections.csv\"", "no_such_file.csv\"")
        with pytest.raises(ConfigError, match="no_such_file"):
            load_config(path)


class TestExperimentConfig:
    def test_built_directly(self):
        config = ExperimentConfig(
            seeds=SeedsConfig(split=1, srgan=2, classifier=3),
            dataset=DatasetConfig(scenes={"urban": Path("urban"), "coast": Path("coast")}, tile=32),
            classifier=ClassifierStageConfig(data=Path("ships"), sources=["sr", "raw", "sr:coast"]),
        )
        assert config.lr_size == 8
        assert config.sr_models() == ["coast", "urban"]
        assert config.classifier_sources() == ["sr:coast", "sr:urban", "raw"]

    def test_train_on_restricts_models(self):
        config = ExperimentConfig.model_validate({
            "seeds": {"split": 0, "srgan": 0, "classifier": 0},
            "dataset": {"scenes": {"urban": "u", "coast": "c"}},
            "srgan": {"train_on": ["urban"]},
        })
        assert config.sr_models() == ["urban"]
        assert config.classifier_sources() == []

    def test_srgan_config_takes_stage_seed_and_lr_size(self):
        config = ExperimentConfig.model_validate({
            "seeds": {"split": 0, "srgan": 7, "classifier": 0},
            "dataset": {"scenes": {"urban": "u"}, "tile": 64},
            "srgan": {"iterations": 3, "precision": "float64"},
        })
        sr = config.srgan.srgan_config(config.seeds.srgan, config.lr_size)
        assert (sr.seed, sr.iterations, sr.lr_size, sr.hr_size, sr.precision) == (7, 3, 16, 64, "float64")
