"""Scalar losses with their gradients.

``mse`` and ``bce`` average over every element; ``cce`` sums over classes and
averages over the batch.
"""

import math
from typing import Literal, Tuple

import numpy as np

from app.core.errors import LossDomainError, ShapeError
from app.core.tensor import ArrayLike, as_array

LossKind = Literal["mse", "bce", "cce"]

CLAMP = 1e-7


def _check_shapes(prediction: np.ndarray, target: np.ndarray) -> None:
    if prediction.shape != target.shape:
        raise ShapeError(f"Prediction shape {prediction.shape} != target shape {target.shape}")


def check_probabilities(p: np.ndarray, what: str = "prediction") -> None:
    """Reject values outside [0, 1]; values inside are later clamped to [1e-7, 1-1e-7]."""
    if not np.isfinite(p).all() or (p < 0).any() or (p > 1).any():
        raise LossDomainError(f"{what} must lie in (0, 1) up to the {CLAMP:g} clamping window")


def loss_and_grad(kind: LossKind, prediction: ArrayLike, target: ArrayLike) -> Tuple[float, np.ndarray]:
    """Loss value and gradient with respect to the prediction.

    Args:
        kind: "mse", "bce" or "cce"
        prediction: Model output (probabilities for bce/cce)
        target: Same shape as prediction (one-hot rows for cce)

    Returns:
        (scalar loss, gradient in the prediction's dtype)
    """
    pred = as_array(prediction)
    tgt = as_array(target)
    _check_shapes(pred, tgt)
    p = pred.astype(np.float64)
    t = tgt.astype(np.float64)

    if kind == "mse":
        diff = p - t
        value = float(np.mean(diff * diff))
        grad = 2.0 * diff / diff.size
    elif kind == "bce":
        check_probabilities(p)
        pc = np.clip(p, CLAMP, 1 - CLAMP)
        value = float(-np.mean(t * np.log(pc) + (1 - t) * np.log(1 - pc)))
        grad = np.where(pc == p, (pc - t) / (pc * (1 - pc)), 0.0) / p.size
    elif kind == "cce":
        check_probabilities(p)
        if not np.all((t == 0) | (t == 1)) or not np.all(t.sum(axis=-1) == 1):
            raise LossDomainError("cce targets must be one-hot rows")
        pc = np.clip(p, CLAMP, 1.0)
        batch = p.shape[0] if p.ndim > 1 else 1
        value = float(-np.sum(t * np.log(pc)) / batch)
        grad = np.where(pc == p, -t / pc, 0.0) / batch
    else:
        raise ValueError(f"Unsupported loss kind: {kind}")

    if not math.isfinite(value):
        raise LossDomainError(f"{kind} loss is not finite")
    return value, grad.astype(pred.dtype if pred.dtype.kind == "f" else np.float64)


def loss(kind: LossKind, prediction: ArrayLike, target: ArrayLike) -> float:
    """Scalar loss value (see :func:`loss_and_grad`)."""
    value, _ = loss_and_grad(kind, prediction, target)
    return value
