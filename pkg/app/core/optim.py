"""SGD, Adam and Adadelta update rules over a ParamStore."""

from typing import Dict, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.errors import ShapeError
from app.core.tensor import ParamStore

OptimizerKind = Literal["sgd", "adam", "adadelta"]

_DEFAULT_LR = {"sgd": 0.01, "adam": 1e-3, "adadelta": 1.0}
_DEFAULT_EPS = {"sgd": 1e-7, "adam": 1e-8, "adadelta": 1e-7}


class OptimizerConfig(BaseModel):
    """Optimizer hyperparameters; unset values take the per-kind defaults."""

    model_config = ConfigDict(extra="forbid")

    kind: OptimizerKind = "adam"
    learning_rate: Optional[float] = Field(default=None, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    rho: float = Field(default=0.95, ge=0, lt=1)
    epsilon: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _fill_defaults(self) -> "OptimizerConfig":
        if self.learning_rate is None:
            self.learning_rate = _DEFAULT_LR[self.kind]
        if self.epsilon is None:
            self.epsilon = _DEFAULT_EPS[self.kind]
        return self


_SLOTS = {"sgd": (), "adam": ("m", "v"), "adadelta": ("accum_grad", "accum_update")}


class OptimizerState:
    """Per-parameter accumulators plus the step counter."""

    def __init__(self, config: OptimizerConfig, slots: Dict[str, Dict[str, np.ndarray]], step: int = 0) -> None:
        self.config = config
        self.slots = slots
        self.step = step

    @classmethod
    def create(cls, config: OptimizerConfig, params: ParamStore) -> "OptimizerState":
        slots = {
            name: {slot: np.zeros_like(params.array(name)) for slot in _SLOTS[config.kind]}
            for name in params.trainable()
        }
        return cls(config, slots)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.config.model_copy(),
            {name: {k: v.copy() for k, v in s.items()} for name, s in self.slots.items()},
            self.step,
        )


def optimizer_step(
    state: OptimizerState,
    params: ParamStore,
    grads: Dict[str, np.ndarray],
) -> Tuple[ParamStore, OptimizerState]:
    """Apply one update to every trainable parameter, in place.

    Args:
        state: Optimizer state (accumulators are updated in place)
        params: Parameters to update
        grads: Gradients covering every trainable parameter

    Returns:
        The updated params and state (same objects)

    Raises:
        ShapeError: If a gradient's shape differs from its parameter
        KeyError: If a trainable parameter has no gradient
    """
    cfg = state.config
    lr, eps = cfg.learning_rate, cfg.epsilon
    state.step += 1

    for name in params.trainable():
        if name not in grads:
            raise KeyError(f"No gradient supplied for trainable parameter '{name}'")
        p = params.array(name)
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"Gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        slots = state.slots.setdefault(
            name, {slot: np.zeros_like(p) for slot in _SLOTS[cfg.kind]}
        )

        if cfg.kind == "sgd":
            p -= lr * g
        elif cfg.kind == "adam":
            m, v = slots["m"], slots["v"]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1 ** state.step)
            v_hat = v / (1 - cfg.beta2 ** state.step)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        else:
            eg, edx = slots["accum_grad"], slots["accum_update"]
            eg *= cfg.rho
            eg += (1 - cfg.rho) * g * g
            delta = np.sqrt(edx + eps) / np.sqrt(eg + eps) * g
            edx *= cfg.rho
            edx += (1 - cfg.rho) * delta * delta
            p -= lr * delta

    return params, state
