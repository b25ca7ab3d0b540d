"""Layer specifications and their numpy forward/backward kernels.

Tensors are batch-first: images are ``(N, C, H, W)``, vectors ``(N, F)``.
Shapes handed to :func:`output_shape` exclude the batch axis.

"same" padding is symmetric zero padding; when the total amount is odd the
extra row/column goes after the data (floor-biased before).
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.special import expit

from app.core.errors import ShapeError

Shape = Tuple[int, ...]

LayerKind = Literal[
    "conv2d",
    "pixel_shuffle",
    "batch_norm",
    "dense",
    "max_pool2d",
    "dropout",
    "elementwise_add",
    "flatten",
    "activation",
]

ActivationKind = Literal["relu", "prelu", "leaky_relu", "sigmoid", "softmax", "tanh"]

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-5
PRELU_INIT = 0.25


class LayerSpec(BaseModel):
    """One node of a model graph.

    ``inputs`` names earlier layers (or ``"input"``); left empty it means the
    previous layer's output.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    kind: LayerKind
    inputs: Tuple[str, ...] = ()

    # conv2d
    kernel_size: Optional[int] = None
    filters: Optional[int] = None
    stride: int = 1
    padding: Literal["same", "valid"] = "same"
    use_bias: bool = True

    # dense
    units: Optional[int] = None

    # max_pool2d
    pool_size: int = 2

    # dropout
    rate: float = 0.0

    # activation
    activation: Optional[ActivationKind] = None
    alpha: float = 0.2

    # pixel_shuffle
    upscale: int = 2

    @model_validator(mode="after")
    def _check_kind_params(self) -> "LayerSpec":
        if self.kind == "conv2d":
            if not self.kernel_size or self.kernel_size <= 0:
                raise ValueError(f"{self.name}: conv2d needs a positive kernel_size")
            if not self.filters or self.filters <= 0:
                raise ValueError(f"{self.name}: conv2d needs a positive filters count")
        if self.stride <= 0:
            raise ValueError(f"{self.name}: stride must be positive")
        if self.kind == "dense" and (not self.units or self.units <= 0):
            raise ValueError(f"{self.name}: dense needs positive units")
        if self.kind == "max_pool2d" and self.pool_size <= 0:
            raise ValueError(f"{self.name}: pool_size must be positive")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"{self.name}: dropout rate must lie in [0, 1)")
        if self.kind == "activation" and self.activation is None:
            raise ValueError(f"{self.name}: activation layer needs an activation")
        if self.kind == "pixel_shuffle" and self.upscale <= 0:
            raise ValueError(f"{self.name}: upscale must be positive")
        if self.kind == "elementwise_add" and len(self.inputs) != 2:
            raise ValueError(f"{self.name}: elementwise_add takes exactly two inputs")
        return self


# Convenience constructors used by the network builders.

def conv2d(name: str, k: int, n: int, s: int = 1, padding: str = "same",
           use_bias: bool = True, inputs: Sequence[str] = ()) -> LayerSpec:
    return LayerSpec(name=name, kind="conv2d", kernel_size=k, filters=n, stride=s,
                     padding=padding, use_bias=use_bias, inputs=tuple(inputs))


def dense(name: str, units: int, inputs: Sequence[str] = ()) -> LayerSpec:
    return LayerSpec(name=name, kind="dense", units=units, inputs=tuple(inputs))


def batch_norm(name: str, inputs: Sequence[str] = ()) -> LayerSpec:
    return LayerSpec(name=name, kind="batch_norm", inputs=tuple(inputs))


def activation(name: str, kind: str, alpha: float = 0.2, inputs: Sequence[str] = ()) -> LayerSpec:
    return LayerSpec(name=name, kind="activation", activation=kind, alpha=alpha,
                     inputs=tuple(inputs))


def max_pool2d(name: str, pool: int = 2, inputs: Sequence[str] = ()) -> LayerSpec:
    return LayerSpec(name=name, kind="max_pool2d", pool_size=pool, inputs=tuple(inputs))


def dropout(name: str, rate: float, inputs: Sequence[str] = ()) -> LayerSpec:
    return LayerSpec(name=name, kind="dropout", rate=rate, inputs=tuple(inputs))


def flatten(name: str, inputs: Sequence[str] = ()) -> LayerSpec:
    return LayerSpec(name=name, kind="flatten", inputs=tuple(inputs))


def pixel_shuffle_layer(name: str, r: int = 2, inputs: Sequence[str] = ()) -> LayerSpec:
    return LayerSpec(name=name, kind="pixel_shuffle", upscale=r, inputs=tuple(inputs))


def add(name: str, a: str, b: str) -> LayerSpec:
    return LayerSpec(name=name, kind="elementwise_add", inputs=(a, b))


@dataclass
class ForwardContext:
    """Per-layer execution context for a forward pass."""

    train: bool
    rng: Optional[np.random.Generator] = None
    routing: Optional[Dict[str, Any]] = None
    state_updates: Dict[str, np.ndarray] = field(default_factory=dict)


def same_padding(size: int, k: int, s: int) -> Tuple[int, int, int]:
    """Return (out, pad_before, pad_after) for "same" padding along one axis."""
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    before = total // 2
    return out, before, total - before


def conv_geometry(spec: LayerSpec, h: int, w: int) -> Tuple[int, int, Tuple[int, int, int, int]]:
    k, s = spec.kernel_size, spec.stride
    if spec.padding == "same":
        ho, pt, pb = same_padding(h, k, s)
        wo, pl, pr = same_padding(w, k, s)
        return ho, wo, (pt, pb, pl, pr)
    if h < k or w < k:
        raise ShapeError(f"{spec.name}: input {h}x{w} smaller than kernel {k}")
    return (h - k) // s + 1, (w - k) // s + 1, (0, 0, 0, 0)


def output_shape(spec: LayerSpec, in_shapes: List[Shape]) -> Shape:
    """Static output shape of one layer, excluding the batch axis."""
    x = in_shapes[0]
    kind = spec.kind

    if kind == "conv2d":
        _require_rank(spec, x, 3)
        ho, wo, _ = conv_geometry(spec, x[1], x[2])
        return (spec.filters, ho, wo)

    if kind == "pixel_shuffle":
        _require_rank(spec, x, 3)
        r2 = spec.upscale ** 2
        if x[0] % r2:
            raise ShapeError(f"{spec.name}: channels {x[0]} not divisible by r^2={r2}")
        return (x[0] // r2, x[1] * spec.upscale, x[2] * spec.upscale)

    if kind == "max_pool2d":
        _require_rank(spec, x, 3)
        p = spec.pool_size
        if x[1] < p or x[2] < p:
            raise ShapeError(f"{spec.name}: input {x[1]}x{x[2]} smaller than pool {p}")
        return (x[0], x[1] // p, x[2] // p)

    if kind == "dense":
        _require_rank(spec, x, 1)
        return (spec.units,)

    if kind == "flatten":
        return (math.prod(x),)

    if kind == "elementwise_add":
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"{spec.name}: cannot add shapes {in_shapes[0]} and {in_shapes[1]}")
        return x

    if kind == "activation" and spec.activation == "softmax":
        _require_rank(spec, x, 1)

    # batch_norm, dropout, activation keep the shape
    return x


def _require_rank(spec: LayerSpec, shape: Shape, rank: int) -> None:
    if len(shape) != rank:
        raise ShapeError(f"{spec.name}: expected rank-{rank} input, got shape {shape}")


def param_shapes(spec: LayerSpec, in_shape: Shape) -> Dict[str, Tuple[Shape, bool]]:
    """Parameter slots of a layer: suffix -> (shape, trainable)."""
    if spec.kind == "conv2d":
        k, c = spec.kernel_size, in_shape[0]
        slots = {"weight": ((spec.filters, c, k, k), True)}
        if spec.use_bias:
            slots["bias"] = ((spec.filters,), True)
        return slots
    if spec.kind == "dense":
        return {"weight": ((in_shape[0], spec.units), True), "bias": ((spec.units,), True)}
    if spec.kind == "batch_norm":
        c = (in_shape[0],)
        return {
            "gamma": (c, True),
            "beta": (c, True),
            "running_mean": (c, False),
            "running_var": (c, False),
        }
    if spec.kind == "activation" and spec.activation == "prelu":
        return {"slope": ((in_shape[0],), True)}
    return {}


def init_param(spec: LayerSpec, slot: str, shape: Shape, rng: np.random.Generator, dtype) -> np.ndarray:
    """Initial value of one parameter slot.

    Conv/dense weights are drawn from U(-sqrt(3/fan_in), sqrt(3/fan_in)), i.e.
    unit-variance scaled by fan-in; biases and shifts start at zero.
    """
    if slot == "weight":
        fan_in = math.prod(shape[1:]) if spec.kind == "conv2d" else shape[0]
        limit = math.sqrt(3.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)
    if slot in ("gamma", "running_var"):
        return np.ones(shape, dtype=dtype)
    if slot == "slope":
        return np.full(shape, PRELU_INIT, dtype=dtype)
    return np.zeros(shape, dtype=dtype)


# ---------------------------------------------------------------------------
# Kernels. Each forward returns (y, cache); each backward returns
# (input_grads, param_grads).
# ---------------------------------------------------------------------------

def _conv_forward(spec, p, xs, ctx):
    x = xs[0]
    w = p["weight"]
    n, c, h, wd = x.shape
    k, s = spec.kernel_size, spec.stride
    ho, wo, (pt, pb, pl, pr) = conv_geometry(spec, h, wd)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x
    acc = np.zeros((spec.filters, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            window = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
            acc += np.tensordot(w[:, :, i, j], window, axes=([1], [1]))
    y = acc.transpose(1, 0, 2, 3)
    if spec.use_bias:
        y = y + p["bias"][None, :, None, None]
    return np.ascontiguousarray(y), {"xp": xp, "pads": (pt, pb, pl, pr), "in_hw": (h, wd)}


def _conv_backward(spec, p, cache, dy):
    w = p["weight"]
    xp = cache["xp"]
    pt, _, pl, _ = cache["pads"]
    h, wd = cache["in_hw"]
    k, s = spec.kernel_size, spec.stride
    _, _, ho, wo = dy.shape
    dacc = dy.transpose(1, 0, 2, 3)
    dw = np.zeros_like(w)
    dxp = np.zeros((xp.shape[1], xp.shape[0], xp.shape[2], xp.shape[3]), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            rows = slice(i, i + s * (ho - 1) + 1, s)
            cols = slice(j, j + s * (wo - 1) + 1, s)
            window = xp[:, :, rows, cols]
            dw[:, :, i, j] = np.tensordot(dacc, window, axes=([1, 2, 3], [0, 2, 3]))
            dxp[:, :, rows, cols] += np.tensordot(w[:, :, i, j], dacc, axes=([0], [0]))
    dx = dxp.transpose(1, 0, 2, 3)[:, :, pt:pt + h, pl:pl + wd]
    grads = {"weight": dw}
    if spec.use_bias:
        grads["bias"] = dy.sum(axis=(0, 2, 3))
    return [np.ascontiguousarray(dx)], grads


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Rearrange (N, C*r*r, H, W) into (N, C, H*r, W*r)."""
    n, c, h, w = x.shape
    out_c = c // (r * r)
    y = x.reshape(n, out_c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, out_c, h * r, w * r))


def pixel_unshuffle(y: np.ndarray, r: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle`."""
    n, c, hr, wr = y.shape
    h, w = hr // r, wr // r
    x = y.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(x.reshape(n, c * r * r, h, w))


def _shuffle_forward(spec, p, xs, ctx):
    return pixel_shuffle(xs[0], spec.upscale), {}


def _shuffle_backward(spec, p, cache, dy):
    return [pixel_unshuffle(dy, spec.upscale)], {}


def _bn_axes(x: np.ndarray) -> Tuple[int, ...]:
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v[None, :, None, None] if ndim == 4 else v[None, :]


def _bn_forward(spec, p, xs, ctx):
    x = xs[0]
    axes = _bn_axes(x)
    if ctx.train:
        mean = x.mean(axis=axes)
        var = ((x - _bn_view(mean, x.ndim)) ** 2).mean(axis=axes)
        m = BN_MOMENTUM
        ctx.state_updates[f"{spec.name}.running_mean"] = m * p["running_mean"] + (1 - m) * mean
        ctx.state_updates[f"{spec.name}.running_var"] = m * p["running_var"] + (1 - m) * var
    else:
        mean, var = p["running_mean"], p["running_var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
    xhat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv_std, x.ndim)
    y = xhat * _bn_view(p["gamma"], x.ndim) + _bn_view(p["beta"], x.ndim)
    return y, {"xhat": xhat, "inv_std": inv_std}


def _bn_backward(spec, p, cache, dy):
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    axes = _bn_axes(dy)
    count = dy.size // dy.shape[1]
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * _bn_view(p["gamma"], dy.ndim)
    sum_dxhat = _bn_view(dxhat.sum(axis=axes), dy.ndim)
    sum_dxhat_xhat = _bn_view((dxhat * xhat).sum(axis=axes), dy.ndim)
    dx = _bn_view(inv_std, dy.ndim) / count * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return [dx], {"gamma": dgamma, "beta": dbeta}


def _dense_forward(spec, p, xs, ctx):
    x = xs[0]
    return x @ p["weight"] + p["bias"], {"x": x}


def _dense_backward(spec, p, cache, dy):
    x = cache["x"]
    return [dy @ p["weight"].T], {"weight": x.T @ dy, "bias": dy.sum(axis=0)}


def _pool_windows(x: np.ndarray, pool: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = h // pool, w // pool
    cropped = x[:, :, :ho * pool, :wo * pool]
    return cropped.reshape(n, c, ho, pool, wo, pool).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, ho, wo, pool * pool
    )


def _pool_forward(spec, p, xs, ctx):
    x = xs[0]
    windows = _pool_windows(x, spec.pool_size)
    if ctx.routing is not None:
        idx = ctx.routing["idx"]
    else:
        idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return y, {"idx": idx, "in_shape": x.shape}


def _pool_backward(spec, p, cache, dy):
    pool = spec.pool_size
    n, c, h, w = cache["in_shape"]
    ho, wo = dy.shape[2], dy.shape[3]
    dwin = np.zeros((n, c, ho, wo, pool * pool), dtype=dy.dtype)
    np.put_along_axis(dwin, cache["idx"][..., None], dy[..., None], axis=-1)
    block = dwin.reshape(n, c, ho, wo, pool, pool).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros((n, c, h, w), dtype=dy.dtype)
    dx[:, :, :ho * pool, :wo * pool] = block.reshape(n, c, ho * pool, wo * pool)
    return [dx], {}


def _dropout_forward(spec, p, xs, ctx):
    x = xs[0]
    if not ctx.train or spec.rate == 0.0:
        return x, {"mask": None}
    if ctx.routing is not None:
        mask = ctx.routing["mask"]
    else:
        keep = ctx.rng.random(x.shape) >= spec.rate
        mask = keep.astype(x.dtype) / (1.0 - spec.rate)
    return x * mask, {"mask": mask}


def _dropout_backward(spec, p, cache, dy):
    mask = cache["mask"]
    return [dy if mask is None else dy * mask], {}


def _flatten_forward(spec, p, xs, ctx):
    x = xs[0]
    return x.reshape(x.shape[0], -1), {"in_shape": x.shape}


def _flatten_backward(spec, p, cache, dy):
    return [dy.reshape(cache["in_shape"])], {}


def _add_forward(spec, p, xs, ctx):
    return xs[0] + xs[1], {}


def _add_backward(spec, p, cache, dy):
    return [dy, dy], {}


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _activation_forward(spec, p, xs, ctx):
    x = xs[0]
    act = spec.activation
    if act in ("relu", "leaky_relu", "prelu"):
        mask = ctx.routing["mask"] if ctx.routing is not None else x > 0
        if act == "relu":
            y = np.where(mask, x, 0).astype(x.dtype)
        elif act == "leaky_relu":
            y = np.where(mask, x, spec.alpha * x).astype(x.dtype)
        else:
            y = np.where(mask, x, _channel_view(p["slope"], x.ndim) * x)
        return y, {"mask": mask, "x": x}
    if act == "sigmoid":
        y = expit(x)
    elif act == "tanh":
        y = np.tanh(x)
    else:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)
    return y, {"y": y}


def _activation_backward(spec, p, cache, dy):
    act = spec.activation
    if act == "relu":
        return [np.where(cache["mask"], dy, 0).astype(dy.dtype)], {}
    if act == "leaky_relu":
        return [np.where(cache["mask"], dy, spec.alpha * dy).astype(dy.dtype)], {}
    if act == "prelu":
        mask, x = cache["mask"], cache["x"]
        slope = _channel_view(p["slope"], dy.ndim)
        axes = tuple(a for a in range(dy.ndim) if a != 1)
        dslope = np.where(mask, 0, x * dy).sum(axis=axes).astype(dy.dtype)
        return [np.where(mask, dy, slope * dy)], {"slope": dslope}
    y = cache["y"]
    if act == "sigmoid":
        return [dy * y * (1 - y)], {}
    if act == "tanh":
        return [dy * (1 - y * y)], {}
    return [y * (dy - (dy * y).sum(axis=1, keepdims=True))], {}


KERNELS = {
    "conv2d": (_conv_forward, _conv_backward),
    "pixel_shuffle": (_shuffle_forward, _shuffle_backward),
    "batch_norm": (_bn_forward, _bn_backward),
    "dense": (_dense_forward, _dense_backward),
    "max_pool2d": (_pool_forward, _pool_backward),
    "dropout": (_dropout_forward, _dropout_backward),
    "flatten": (_flatten_forward, _flatten_backward),
    "elementwise_add": (_add_forward, _add_backward),
    "activation": (_activation_forward, _activation_backward),
}

# Caches that a routing-frozen forward may reuse from a reference tape.
ROUTING_KINDS = {"max_pool2d", "dropout"}
ROUTING_ACTIVATIONS = {"relu", "leaky_relu", "prelu"}


def uses_routing(spec: LayerSpec) -> bool:
    if spec.kind in ROUTING_KINDS:
        return True
    return spec.kind == "activation" and spec.activation in ROUTING_ACTIVATIONS
