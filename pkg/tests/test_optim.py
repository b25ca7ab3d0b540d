import numpy as np
import pytest

from app.core.errors import ShapeError
from app.core.optim import OptimizerConfig, OptimizerState, optimizer_step
from app.core.tensor import ParamStore, Tensor


@pytest.fixture
def scalar_params():
    """A single trainable scalar ``w`` plus a frozen buffer."""

    def make(value: float) -> ParamStore:
        return ParamStore({
            "w": Tensor(np.array([value]), requires_grad=True),
            "buffer": Tensor(np.array([5.0]), requires_grad=False),
        })

    return make


class TestDefaults:
    @pytest.mark.parametrize("kind,lr", [("sgd", 0.01), ("adam", 1e-3), ("adadelta", 1.0)])
    def test_learning_rate_per_kind(self, kind, lr):
        assert OptimizerConfig(kind=kind).learning_rate == lr

    def test_explicit_values_are_kept(self):
        cfg = OptimizerConfig(kind="sgd", learning_rate=0.5, epsilon=1e-3)
        assert (cfg.learning_rate, cfg.epsilon) == (0.5, 1e-3)


class TestUpdates:
    def test_sgd_step_on_square(self, scalar_params):
        params = scalar_params(1.0)
        state = OptimizerState.create(OptimizerConfig(kind="sgd", learning_rate=0.1), params)
        optimizer_step(state, params, {"w": 2.0 * params.array("w")})
        assert params.array("w")[0] == pytest.approx(0.8)
        assert params.array("buffer")[0] == 5.0
        assert state.step == 1

    def test_adam_first_step_has_learning_rate_magnitude(self, scalar_params):
        params = scalar_params(1.0)
        state = OptimizerState.create(OptimizerConfig(kind="adam", learning_rate=0.01), params)
        optimizer_step(state, params, {"w": np.array([3.0])})
        assert params.array("w")[0] == pytest.approx(0.99, abs=1e-6)

    def test_adadelta_zero_gradient_is_a_no_op(self, scalar_params):
        params = scalar_params(2.0)
        state = OptimizerState.create(OptimizerConfig(kind="adadelta"), params)
        for _ in range(3):
            optimizer_step(state, params, {"w": np.zeros(1)})
        assert params.array("w")[0] == 2.0

    def test_adadelta_moves_steadily_toward_minimum(self, scalar_params):
        params = scalar_params(0.0)
        state = OptimizerState.create(OptimizerConfig(kind="adadelta"), params)
        distances = []
        for _ in range(20):
            w = params.array("w")
            optimizer_step(state, params, {"w": 2.0 * (w - 3.0)})
            distances.append(abs(params.array("w")[0] - 3.0))
        assert all(b < a for a, b in zip(distances, distances[1:]))

    def test_state_copy_is_independent(self, scalar_params):
        params = scalar_params(1.0)
        state = OptimizerState.create(OptimizerConfig(kind="adam"), params)
        snapshot = state.copy()
        optimizer_step(state, params, {"w": np.array([1.0])})
        assert snapshot.step == 0
        assert snapshot.slots["w"]["m"][0] == 0.0


class TestErrors:
    def test_missing_gradient(self, scalar_params):
        params = scalar_params(1.0)
        state = OptimizerState.create(OptimizerConfig(kind="sgd"), params)
        with pytest.raises(KeyError):
            optimizer_step(state, params, {})

    def test_wrong_gradient_shape(self, scalar_params):
        params = scalar_params(1.0)
        state = OptimizerState.create(OptimizerConfig(kind="sgd"), params)
        with pytest.raises(ShapeError):
            optimizer_step(state, params, {"w": np.ones(2)})
