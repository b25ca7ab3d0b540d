import numpy as np
import pytest

from app.core.classifier import ClassifierSpec, build
from app.core.errors import NonFiniteError, ShapeError, TapeError
from app.core.graph import (
    ModelGraph,
    apply_state_updates,
    backward,
    compare_gradients,
    forward,
    grad_check,
)
from app.core.layers import (
    activation,
    add,
    batch_norm,
    conv2d,
    dense,
    dropout,
    flatten,
    max_pool2d,
    pixel_shuffle_layer,
)
from app.core.srgan import DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator
from app.core.tensor import ParamStore, Tensor

# (id, per-sample input shape, batch, layers)
#
# Biased layers never feed batch norm here. Normalization cancels such a
# bias, so its analytic gradient is exactly zero, the finite-difference one is
# rounding noise, and the relative error against the zero floor comes out
# near 1.
GRAD_GRAPHS = [
    ("dense_sigmoid", (4,), 3, [dense("d", 3), activation("a", "sigmoid")]),
    ("dense_tanh", (4,), 3, [dense("d", 3), activation("a", "tanh")]),
    ("dense_softmax", (5,), 3, [dense("d", 4), activation("a", "softmax")]),
    ("mlp_relu", (6,), 4, [dense("d1", 5), activation("a", "relu"), dense("d2", 2)]),
    ("mlp_leaky", (6,), 4, [dense("d1", 5), activation("a", "leaky_relu", 0.1), dense("d2", 2)]),
    ("mlp_prelu", (6,), 4, [dense("d1", 5), activation("a", "prelu"), dense("d2", 2)]),
    ("mlp_dropout", (6,), 4, [dense("d1", 8), dropout("drop", 0.3), dense("d2", 2)]),
    ("flatten_bn_dense", (2, 2, 2), 8, [flatten("f"), batch_norm("bn"), dense("d", 3)]),
    ("conv_same", (2, 5, 5), 2, [conv2d("c", 3, 3)]),
    ("conv_valid", (2, 6, 6), 2, [conv2d("c", 3, 2, padding="valid")]),
    ("conv_stride2_same", (2, 6, 6), 2, [conv2d("c", 3, 3, s=2)]),
    ("conv_stride2_valid", (1, 7, 7), 2, [conv2d("c", 3, 2, s=2, padding="valid")]),
    ("conv_1x1_nobias", (3, 4, 4), 2, [conv2d("c", 1, 2, use_bias=False)]),
    ("conv_even_kernel", (2, 5, 5), 2, [conv2d("c", 2, 2)]),
    ("conv_bn", (2, 5, 5), 2, [conv2d("c", 3, 3, use_bias=False), batch_norm("bn")]),
    ("conv_relu_pool", (2, 6, 6), 2, [conv2d("c", 3, 3), activation("a", "relu"), max_pool2d("p", 2)]),
    ("conv_pool_odd", (1, 5, 5), 2, [conv2d("c", 3, 2), max_pool2d("p", 2)]),
    ("conv_prelu", (2, 4, 4), 2, [conv2d("c", 3, 3), activation("a", "prelu")]),
    ("conv_tanh", (2, 4, 4), 2, [conv2d("c", 3, 2), activation("a", "tanh")]),
    ("conv_shuffle", (2, 3, 3), 2, [conv2d("c", 3, 8), pixel_shuffle_layer("s", 2), activation("a", "prelu")]),
    (
        "residual_block",
        (2, 4, 4),
        2,
        [
            conv2d("c1", 3, 2, use_bias=False),
            batch_norm("bn1"),
            activation("a", "prelu"),
            conv2d("c2", 3, 2, use_bias=False),
            batch_norm("bn2"),
            add("sum", "input", "bn2"),
        ],
    ),
    (
        "mini_discriminator",
        (2, 8, 8),
        4,
        [
            conv2d("c1", 3, 3),
            activation("a1", "leaky_relu"),
            conv2d("c2", 3, 4, s=2, use_bias=False),
            batch_norm("bn"),
            activation("a2", "leaky_relu"),
            flatten("f"),
            dense("d", 1),
            activation("out", "sigmoid"),
        ],
    ),
    (
        "mini_classifier",
        (1, 8, 8),
        3,
        [
            conv2d("c", 3, 2, padding="valid"),
            activation("r", "relu"),
            max_pool2d("p", 2),
            dropout("drop", 0.25),
            flatten("f"),
            dense("d", 2),
            activation("s", "softmax"),
        ],
    ),
]


class TestGradCheck:
    @pytest.mark.parametrize("layers_id,input_shape,batch,layers", GRAD_GRAPHS, ids=[g[0] for g in GRAD_GRAPHS])
    def test_backward_matches_finite_differences(self, graph64, layers_id, input_shape, batch, layers):
        graph = graph64(input_shape, layers, seed=7)
        x = np.random.default_rng(11).standard_normal((batch,) + input_shape)
        assert grad_check(graph, x, eps=1e-5) < 1e-4

    def test_single_dense_is_tight(self, graph64):
        graph = graph64((5,), [dense("d", 3)])
        x = np.random.default_rng(0).standard_normal((2, 5))
        assert grad_check(graph, x, eps=1e-5) < 1e-6

    def test_input_gradient(self, graph64):
        graph = graph64(
            (2, 5, 5),
            [conv2d("c", 3, 3), activation("a", "leaky_relu"), flatten("f"), dense("d", 2), activation("t", "tanh")],
        )
        x = np.random.default_rng(3).standard_normal((2, 2, 5, 5))
        out, tape = forward(graph, x, mode="train")
        probe = np.random.default_rng(4).standard_normal(out.shape)
        grads = backward(tape, probe)

        def objective() -> float:
            y, _ = forward(graph, x, mode="train", routing=tape)
            return float(np.sum(y.data * probe))

        assert compare_gradients(objective, {"input": x}, grads, eps=1e-5) < 1e-4

    def test_generator(self):
        graph = build_generator(GeneratorSpec(residual_blocks=1, base_channels=2), lr_size=4)
        graph.init_params(0, np.float64)
        x = np.random.default_rng(5).uniform(-1, 1, (2, 3, 4, 4))
        assert grad_check(graph, x, max_entries=4) < 1e-4

    def test_discriminator(self):
        graph = build_discriminator(DiscriminatorSpec(base_channels=2, dense_units=4), hr_size=32)
        graph.init_params(0, np.float64)
        x = np.random.default_rng(6).uniform(-1, 1, (4, 3, 32, 32))
        assert grad_check(graph, x, max_entries=4) < 1e-4

    def test_classifier(self):
        model = build(ClassifierSpec(conv_channels=2, latent_channels=2, dense_units=4), seed=0, dtype=np.float64)
        x = np.random.default_rng(8).uniform(0, 1, (2, 3, 80, 80))
        assert grad_check(model.graph, x, max_entries=3) < 1e-4

    def test_rejects_float32_params(self):
        graph = ModelGraph("g", (3,), [dense("d", 2)])
        graph.init_params(0, np.float32)
        with pytest.raises(ValueError):
            grad_check(graph, np.ones((1, 3)))

    def test_rejects_out_of_range_step(self, graph64):
        graph = graph64((3,), [dense("d", 2)])
        with pytest.raises(ValueError):
            grad_check(graph, np.ones((1, 3)), eps=1e-2)


class TestForward:
    def test_identity_1x1_conv(self, graph64, rng):
        graph = graph64((3, 4, 4), [conv2d("c", 1, 3)])
        graph.params["c.weight"] = Tensor(np.eye(3).reshape(3, 3, 1, 1), requires_grad=True)
        x = rng.standard_normal((2, 3, 4, 4))
        out, _ = forward(graph, x)
        np.testing.assert_allclose(out.data, x)

    def test_softmax_of_zeros(self, graph64):
        graph = graph64((2,), [activation("s", "softmax")])
        out, _ = forward(graph, np.zeros((1, 2)))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_ones_kernel_sums_window(self, graph64):
        graph = graph64((1, 2, 2), [conv2d("c", 2, 1, padding="valid", use_bias=False)])
        graph.params["c.weight"] = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        out, _ = forward(graph, np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == pytest.approx(10.0)

    @pytest.mark.parametrize("shape", [(6, 3), (5, 3, 4, 4)])
    def test_train_batch_norm_standardizes_each_channel(self, graph64, rng, shape):
        graph = graph64(shape[1:], [batch_norm("bn")])
        x = rng.normal(5.0, 3.0, shape)
        out, _ = forward(graph, x, mode="train")
        axes = (0,) if len(shape) == 2 else (0, 2, 3)
        np.testing.assert_allclose(out.data.mean(axis=axes), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=axes), 1.0, atol=1e-4)

    def test_eval_batch_norm_uses_running_statistics(self, graph64, rng):
        graph = graph64((3,), [batch_norm("bn")])
        x = rng.standard_normal((4, 3))
        out, _ = forward(graph, x, mode="eval")
        np.testing.assert_allclose(out.data, x / np.sqrt(1.0 + 1e-5))

    def test_dropout_is_identity_in_eval(self, graph64, rng):
        graph = graph64((6,), [dropout("drop", 0.5)])
        x = rng.standard_normal((3, 6))
        out, _ = forward(graph, x, mode="eval")
        np.testing.assert_array_equal(out.data, x)

    def test_dropout_mask_follows_seed(self, graph64):
        graph = graph64((50,), [dropout("drop", 0.5)])
        x = np.ones((2, 50))
        a, _ = forward(graph, x, mode="train", rng_seed=3)
        b, _ = forward(graph, x, mode="train", rng_seed=3)
        c, _ = forward(graph, x, mode="train", rng_seed=4)
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)
        assert set(np.unique(a.data)) <= {0.0, 2.0}

    def test_wrong_rank_input(self, graph64):
        graph = graph64((3, 4, 4), [conv2d("c", 3, 2)])
        with pytest.raises(ShapeError):
            forward(graph, np.ones((3, 4, 4)))

    def test_non_finite_output_names_layer(self, graph64):
        graph = graph64((2,), [dense("d1", 2), dense("d2", 2)])
        graph.params["d2.weight"] = Tensor(np.full((2, 2), np.inf), requires_grad=True)
        with pytest.raises(NonFiniteError) as info:
            forward(graph, np.ones((1, 2)))
        assert info.value.where == "d2"

    def test_float32_params_run_in_float32(self):
        graph = ModelGraph("g", (3,), [dense("d", 2)])
        graph.init_params(0, np.float32)
        out, _ = forward(graph, np.ones((1, 3)))
        assert out.dtype == np.float32


class TestBackward:
    def test_dense_weight_gradient_is_outer_product(self, graph64):
        graph = graph64((3,), [dense("d", 2)])
        x = np.array([[1.0, 2.0, 3.0]])
        _, tape = forward(graph, x, mode="train")
        grads = backward(tape, np.ones((1, 2)))
        np.testing.assert_allclose(grads["d.weight"], np.outer(x[0], [1.0, 1.0]))
        np.testing.assert_allclose(grads["d.bias"], [1.0, 1.0])
        np.testing.assert_allclose(grads["input"], graph.params.array("d.weight").sum(axis=1)[None])

    def test_eval_tape_is_rejected(self, graph64):
        graph = graph64((3,), [dense("d", 2)])
        _, tape = forward(graph, np.ones((1, 3)), mode="eval")
        with pytest.raises(TapeError):
            backward(tape, np.ones((1, 2)))

    def test_frozen_params_receive_no_gradient(self):
        graph = ModelGraph("g", (3,), [dense("d", 2)])
        graph.init_params(0, np.float64, trainable=False)
        _, tape = forward(graph, np.ones((1, 3)), mode="train")
        grads = backward(tape, np.ones((1, 2)))
        assert set(grads) == {"input"}

    def test_running_statistics_update(self, graph64, rng):
        graph = graph64((2, 3, 3), [conv2d("c", 1, 2, use_bias=False), batch_norm("bn")])
        x = rng.standard_normal((4, 2, 3, 3))
        _, tape = forward(graph, x, mode="train")
        before = graph.params.array("bn.running_mean").copy()
        apply_state_updates(graph, tape)
        after = graph.params.array("bn.running_mean")
        conv_out = np.einsum("oc,nchw->nohw", graph.params.array("c.weight")[:, :, 0, 0], x)
        np.testing.assert_allclose(after, 0.99 * before + 0.01 * conv_out.mean(axis=(0, 2, 3)))


class TestParamStore:
    def test_tensor_rejects_empty_dimension(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_tensor_promotes_integers(self):
        assert Tensor(np.arange(3)).dtype == np.float64

    def test_copy_is_independent(self, graph64):
        graph = graph64((3,), [dense("d", 2)])
        copy = graph.params.copy()
        copy.array("d.weight")[0, 0] += 1.0
        assert not copy.equals(graph.params)

    def test_freeze_marks_everything_untrainable(self, graph64):
        frozen = graph64((3,), [dense("d", 2)]).params.freeze()
        assert frozen.trainable() == []
        assert frozen.num_parameters() == 0
        assert frozen.num_parameters(trainable_only=False) == 8

    def test_graph_round_trips_through_dict(self, graph64):
        graph = graph64((3, 4, 4), [conv2d("c", 3, 2), activation("a", "relu")])
        rebuilt = ModelGraph.from_dict(graph.to_dict(), graph.params)
        assert rebuilt.layers == graph.layers
        assert rebuilt.shapes == graph.shapes
        assert isinstance(rebuilt.params, ParamStore)
