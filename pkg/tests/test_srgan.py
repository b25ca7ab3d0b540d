import math

import numpy as np
import pytest

from app.core.errors import DatasetError, ShapeError, TrainingDivergedError
from app.core.graph import ModelGraph
from app.core.images import ImageTensor, NormalizationSpec, normalize
from app.core.layers import conv2d
from app.core.metrics import psnr
from app.core.resample import KEYS, NEAREST, upscale_4x
from app.core.srgan import (
    LOSS_LOG_HEADER,
    DiscriminatorSpec,
    FeatureExtractor,
    FeatureExtractorSpec,
    GeneratorSpec,
    SrganConfig,
    adversarial_loss,
    as_sr_model,
    batch_indices,
    build_discriminator,
    build_generator,
    checkpoints_equal,
    content_loss,
    discriminator_loss,
    generator_loss,
    init_checkpoint,
    load_checkpoint,
    objective_grad_check,
    save_checkpoint,
    super_resolve,
    train,
)
from app.core.synthetic import agricultural_scene
from app.core.tensor import Tensor
from app.core.tiling import PairedDataset, make_pairs, tile_scene


def tiny_config(**overrides) -> SrganConfig:
    values = dict(
        seed=3,
        iterations=2,
        batch_size=2,
        lr_size=8,
        generator=GeneratorSpec(residual_blocks=1, base_channels=4),
        discriminator=DiscriminatorSpec(base_channels=2, dense_units=8),
        feature_extractor=FeatureExtractorSpec(channels=(2, 4), tap_layer=2),
    )
    values.update(overrides)
    return SrganConfig(**values)


@pytest.fixture(scope="module")
def pairs() -> PairedDataset:
    scene = agricultural_scene(np.random.default_rng(5), 128, 32)
    return make_pairs(tile_scene(scene, 32, "field"), KEYS, expected_size=32)


@pytest.fixture
def identity_phi():
    graph = ModelGraph("phi", (3, 8, 8), [conv2d("c", 1, 3)])
    graph.init_params(0, dtype=np.float64)
    graph.params["c.weight"] = Tensor(np.eye(3).reshape(3, 3, 1, 1))
    graph.params["c.bias"] = Tensor(np.zeros(3))
    return FeatureExtractor(graph)


class TestLosses:
    def test_adversarial_at_one_half(self):
        assert adversarial_loss(np.full((2, 1), 0.5)) == pytest.approx(math.log(2))

    def test_adversarial_averages_the_batch(self):
        expected = (math.log(4) + math.log(2)) / 2
        assert adversarial_loss(np.array([[0.25], [0.5]])) == pytest.approx(expected)

    def test_discriminator_undecided(self):
        assert discriminator_loss([[0.5]], [[0.5]]) == pytest.approx(math.log(2))

    def test_discriminator_confident(self):
        assert discriminator_loss([[0.9]], [[0.1]]) == pytest.approx(-math.log(0.9))

    def test_content_of_identical_images_is_zero(self, identity_phi, rng):
        x = rng.uniform(-1, 1, (3, 8, 8))
        assert content_loss(x, x, identity_phi) == 0.0

    def test_identity_features_give_pixel_mse(self, identity_phi, rng):
        hr, sr = rng.uniform(-1, 1, (3, 8, 8)), rng.uniform(-1, 1, (3, 8, 8))
        assert content_loss(hr, sr, identity_phi) == pytest.approx(np.mean((hr - sr) ** 2))

    def test_generator_loss_weights_the_adversarial_term(self, identity_phi, rng):
        hr, sr = rng.uniform(-1, 1, (1, 3, 8, 8)), rng.uniform(-1, 1, (1, 3, 8, 8))
        d = np.array([[0.3]])
        expected = content_loss(hr, sr, identity_phi) + 1e-3 * adversarial_loss(d)
        assert generator_loss(hr, sr, d, identity_phi) == pytest.approx(expected)

    def test_feature_extractor_is_frozen(self, identity_phi):
        assert identity_phi.graph.params.trainable() == []
        with pytest.raises(ValueError):
            identity_phi.graph.params.array("c.weight")[0, 0, 0, 0] = 2.0

    def test_content_shape_mismatch(self, identity_phi):
        with pytest.raises(ShapeError):
            content_loss(np.zeros((3, 8, 8)), np.zeros((3, 8, 4)), identity_phi)


class TestObjectiveGradient:
    def test_generator_objective_matches_finite_differences(self, rng):
        generator = build_generator(GeneratorSpec(residual_blocks=1, base_channels=2), lr_size=8)
        generator.init_params(1, dtype=np.float64)
        discriminator = build_discriminator(DiscriminatorSpec(base_channels=2, dense_units=4), hr_size=32)
        discriminator.init_params(2, dtype=np.float64)
        phi = FeatureExtractor.from_spec(FeatureExtractorSpec(channels=(2, 2), tap_layer=2), 32, np.float64)
        lr = rng.uniform(-1, 1, (2, 3, 8, 8))
        hr = rng.uniform(-1, 1, (2, 3, 32, 32))
        assert objective_grad_check(generator, discriminator, phi, lr, hr, max_entries=4) < 1e-4


class TestTraining:
    def test_batch_indices_depend_only_on_seed_and_iteration(self):
        a = batch_indices(7, 3, 10, 4)
        np.testing.assert_array_equal(a, batch_indices(7, 3, 10, 4))
        assert len(set(a.tolist())) == 4
        assert list(a) == sorted(a)
        assert len(batch_indices(7, 3, 2, 16)) == 2

    def test_zero_iterations_returns_the_initial_state(self, pairs):
        config = tiny_config(iterations=0)
        result = train(pairs, config)
        assert result.history == []
        assert checkpoints_equal(result.checkpoint, init_checkpoint(config))

    def test_training_is_deterministic(self, pairs):
        config = tiny_config()
        a, b = train(pairs, config), train(pairs, config)
        assert [r.model_dump() for r in a.history] == [r.model_dump() for r in b.history]
        assert checkpoints_equal(a.checkpoint, b.checkpoint)
        assert a.checkpoint.iteration == 2

    def test_resume_from_file_matches_uninterrupted_run(self, pairs, tmp_path):
        straight = train(pairs, tiny_config(iterations=4))

        first = train(pairs, tiny_config(iterations=2))
        path = save_checkpoint(first.checkpoint, tmp_path / "half.srwb")
        resumed = train(pairs, tiny_config(iterations=4), resume=load_checkpoint(path))

        assert [r.iteration for r in resumed.history] == [3, 4]
        assert checkpoints_equal(resumed.checkpoint, straight.checkpoint)

    def test_resume_on_other_pairs_is_refused(self, pairs):
        first = train(pairs, tiny_config(iterations=1))
        nearest = make_pairs(pairs.hr, NEAREST, expected_size=32)
        with pytest.raises(DatasetError):
            train(nearest, tiny_config(iterations=2), resume=first.checkpoint)

    def test_checkpoint_file_round_trip(self, pairs, tmp_path):
        ckpt = train(pairs, tiny_config()).checkpoint
        loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "sr.srwb"))
        assert loaded.config == ckpt.config
        assert loaded.rng_state == ckpt.rng_state
        assert loaded.data_key == pairs.fingerprint()
        assert checkpoints_equal(loaded, ckpt)

    def test_loss_log(self, pairs, tmp_path):
        log = tmp_path / "logs" / "loss.csv"
        seen = []
        train(pairs, tiny_config(iterations=3), loss_log=log, on_iteration=seen.append)
        lines = log.read_text().splitlines()
        assert lines[0] == LOSS_LOG_HEADER
        assert len(lines) == 4
        assert lines[1].startswith("1,")
        assert [r.iteration for r in seen] == [1, 2, 3]

    def test_previews(self, pairs):
        result = train(pairs, tiny_config(iterations=2, preview_every=1))
        assert [it for it, _ in result.previews] == [1, 2]
        assert result.previews[0][1].shape == (3, 32, 32)

    def test_no_pairs(self):
        with pytest.raises(DatasetError):
            train(PairedDataset(hr=[], lr=[]), tiny_config())

    def test_lr_size_mismatch(self, pairs):
        with pytest.raises(ShapeError):
            train(pairs, tiny_config(lr_size=16))

    def test_non_finite_input_diverges(self, pairs):
        poisoned = PairedDataset(
            hr=pairs.hr,
            lr=[ImageTensor(np.full(lr.shape, np.nan), provenance=lr.provenance) for lr in pairs.lr],
        )
        with pytest.raises(TrainingDivergedError) as info:
            train(poisoned, tiny_config())
        assert info.value.iteration == 1
        assert info.value.last_checkpoint.iteration == 0

    @pytest.mark.slow
    def test_desk_scale_overfit_beats_the_baseline(self):
        scene = agricultural_scene(np.random.default_rng(11), 640, 640)
        chips = make_pairs(tile_scene(scene, 320, "farm"), KEYS, expected_size=320)
        assert len(chips) == 4
        config = SrganConfig(
            seed=7,
            iterations=200,
            batch_size=4,
            lr_size=80,
            generator=GeneratorSpec(residual_blocks=4, base_channels=16),
        )
        result = train(chips, config)
        assert result.history[-1].content <= 0.5 * result.history[0].content

        model = as_sr_model(result.checkpoint)
        sr_psnr = np.mean([psnr(hr, model(lr)) for hr, lr in zip(chips.hr, chips.lr)])
        baseline_psnr = np.mean([psnr(hr, upscale_4x(lr)) for hr, lr in zip(chips.hr, chips.lr)])
        assert sr_psnr > baseline_psnr


class TestInference:
    def test_zeroed_output_layer_gives_mid_grey(self):
        ckpt = init_checkpoint(tiny_config())
        params = ckpt.generator.params
        params["g_conv_out.weight"] = Tensor(np.zeros_like(params.array("g_conv_out.weight")), requires_grad=True)
        params["g_conv_out.bias"] = Tensor(np.zeros_like(params.array("g_conv_out.bias")), requires_grad=True)

        lr = ImageTensor(np.random.default_rng(0).integers(0, 256, (3, 8, 8)).astype(float))
        sr = super_resolve(ckpt, normalize(lr, NormalizationSpec()))
        assert sr.shape == (3, 32, 32)
        assert sr.convention == "signed_unit"
        np.testing.assert_array_equal(sr.data, 0.0)

        out = as_sr_model(ckpt)(lr)
        assert out.convention == "byte"
        np.testing.assert_array_equal(out.data, 128.0)

    def test_full_size_generator_output_shape(self):
        ckpt = init_checkpoint(tiny_config(lr_size=80, generator=GeneratorSpec(residual_blocks=1, base_channels=2)))
        sr = super_resolve(ckpt, ImageTensor(np.zeros((3, 80, 80)), "signed_unit"))
        assert sr.shape == (3, 320, 320)

    def test_byte_input_is_rejected(self):
        ckpt = init_checkpoint(tiny_config())
        with pytest.raises(ValueError):
            super_resolve(ckpt, ImageTensor(np.zeros((3, 8, 8))))

    def test_single_channel_is_rejected(self):
        ckpt = init_checkpoint(tiny_config())
        with pytest.raises(ShapeError):
            super_resolve(ckpt, ImageTensor(np.zeros((1, 8, 8)), "signed_unit"))
