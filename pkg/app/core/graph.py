"""Static layer DAG with reverse-mode differentiation.

A :class:`ModelGraph` is a topologically ordered list of :class:`LayerSpec`
nodes plus the :class:`ParamStore` holding their weights. ``forward`` records a
:class:`Tape`; ``backward`` replays it in reverse.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import NonFiniteError, ShapeError, TapeError
from app.core.layers import (
    KERNELS,
    ForwardContext,
    LayerSpec,
    Shape,
    init_param,
    output_shape,
    param_shapes,
    uses_routing,
)
from app.core.tensor import ArrayLike, ParamStore, Tensor, as_array

logger = logging.getLogger(__name__)

INPUT = "input"

Mode = Literal["train", "eval"]


class ModelGraph:
    """Layer DAG plus its named parameters."""

    def __init__(
        self,
        name: str,
        input_shape: Sequence[int],
        layers: Sequence[LayerSpec],
        output: Optional[str] = None,
        params: Optional[ParamStore] = None,
    ) -> None:
        """Build a graph and validate its wiring.

        Args:
            name: Graph identifier used in logs and checkpoints
            input_shape: Per-sample input shape (C, H, W) or (F,)
            layers: Layers in topological order
            output: Name of the output node (defaults to the last layer)
            params: Parameter store; call :meth:`init_params` when omitted

        Raises:
            ShapeError: If wiring is invalid or shapes cannot be inferred
        """
        self.name = name
        self.input_shape: Shape = tuple(int(d) for d in input_shape)
        self.layers: List[LayerSpec] = list(layers)
        self.output = output or self.layers[-1].name
        self.params = params if params is not None else ParamStore()
        self._validate_wiring()
        self.shapes = infer_shapes(self, self.input_shape)

    def _validate_wiring(self) -> None:
        seen = {INPUT}
        for layer in self.layers:
            if layer.name in seen:
                raise ShapeError(f"Duplicate node name '{layer.name}' in graph '{self.name}'")
            for src in self.inputs_of(layer):
                if src not in seen:
                    raise ShapeError(
                        f"Layer '{layer.name}' reads '{src}' before it is produced"
                    )
            seen.add(layer.name)
        if self.output not in seen:
            raise ShapeError(f"Output node '{self.output}' not found in graph '{self.name}'")

    def inputs_of(self, layer: LayerSpec) -> Tuple[str, ...]:
        if layer.inputs:
            return layer.inputs
        index = self.layers.index(layer)
        return (self.layers[index - 1].name,) if index else (INPUT,)

    def init_params(self, seed: int, dtype=np.float32, trainable: bool = True) -> ParamStore:
        """Initialize every parameter slot from a seeded generator.

        Args:
            seed: Seed for the weight initializer
            dtype: Parameter precision
            trainable: Mark weights as trainable (False for frozen extractors)

        Returns:
            The new parameter store (also attached to the graph)
        """
        rng = np.random.default_rng(seed)
        store = ParamStore()
        shapes = {INPUT: self.input_shape}
        for layer, out in zip(self.layers, self.shapes):
            in_shape = shapes[self.inputs_of(layer)[0]]
            for slot, (shape, is_trainable) in param_shapes(layer, in_shape).items():
                value = init_param(layer, slot, shape, rng, dtype)
                store[f"{layer.name}.{slot}"] = Tensor(value, requires_grad=trainable and is_trainable)
            shapes[layer.name] = out
        self.params = store
        return store

    def layer_params(self, layer: LayerSpec) -> Dict[str, np.ndarray]:
        prefix = f"{layer.name}."
        return {
            name[len(prefix):]: t.data
            for name, t in self.params.items()
            if name.startswith(prefix)
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "output": self.output,
            "layers": [layer.model_dump(mode="json") for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], params: Optional[ParamStore] = None) -> "ModelGraph":
        return cls(
            name=data["name"],
            input_shape=data["input_shape"],
            layers=[LayerSpec.model_validate(layer) for layer in data["layers"]],
            output=data["output"],
            params=params,
        )

    def num_parameters(self) -> int:
        return self.params.num_parameters()


@dataclass
class Tape:
    """Record of one forward pass, sufficient for :func:`backward`."""

    graph: ModelGraph
    mode: Mode
    rng_seed: int
    input_shape: Tuple[int, ...] = ()
    caches: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    state_updates: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def recorded(self) -> bool:
        return self.mode == "train"


def infer_shapes(graph: ModelGraph, input_shape: Sequence[int]) -> List[Shape]:
    """Statically compute every layer's output shape.

    Args:
        graph: Graph to analyse
        input_shape: Per-sample input shape

    Returns:
        Output shape of each layer, in layer order

    Raises:
        ShapeError: Naming the first layer whose input shape is incompatible
    """
    shapes: Dict[str, Shape] = {INPUT: tuple(input_shape)}
    result = []
    for layer in graph.layers:
        in_shapes = [shapes[src] for src in graph.inputs_of(layer)]
        try:
            out = output_shape(layer, in_shapes)
        except ShapeError:
            raise
        except Exception as e:
            raise ShapeError(f"{layer.name}: cannot infer output shape ({e})") from e
        _check_param_shapes(graph, layer, in_shapes[0])
        shapes[layer.name] = out
        result.append(out)
    return result


def _check_param_shapes(graph: ModelGraph, layer: LayerSpec, in_shape: Shape) -> None:
    for slot, (shape, _) in param_shapes(layer, in_shape).items():
        name = f"{layer.name}.{slot}"
        if name in graph.params and graph.params[name].shape != shape:
            raise ShapeError(
                f"{layer.name}: parameter '{slot}' has shape {graph.params[name].shape}, "
                f"input {in_shape} requires {shape}"
            )


def layer_seed(rng_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([rng_seed, index])


def forward(
    graph: ModelGraph,
    input: ArrayLike,
    mode: Mode = "eval",
    rng_seed: int = 0,
    routing: Optional[Tape] = None,
) -> Tuple[Tensor, Tape]:
    """Run the graph on a batch.

    Args:
        graph: Graph with initialized parameters
        input: Batch of shape (N, *input_shape)
        mode: "train" records caches, uses batch statistics and dropout;
              "eval" uses running statistics and disables dropout
        rng_seed: Seed for dropout masks
        routing: Reference tape whose ReLU masks, pool argmaxes and dropout
                 masks are reused (finite-difference checks)

    Returns:
        Output tensor and the tape of the pass

    Raises:
        ShapeError: If the input does not fit the graph
        NonFiniteError: Naming the first layer producing NaN/inf
    """
    x = as_array(input)
    if x.ndim != len(graph.input_shape) + 1:
        raise ShapeError(
            f"Graph '{graph.name}' expects batched rank-{len(graph.input_shape) + 1} input, "
            f"got shape {x.shape}"
        )
    infer_shapes(graph, x.shape[1:])
    dtype = _param_dtype(graph)
    if x.dtype != dtype:
        x = x.astype(dtype)

    train = mode == "train"
    tape = Tape(graph=graph, mode=mode, rng_seed=rng_seed, input_shape=x.shape)
    values: Dict[str, np.ndarray] = {INPUT: x}

    for index, layer in enumerate(graph.layers):
        fwd, _ = KERNELS[layer.kind]
        ctx = ForwardContext(
            train=train,
            rng=layer_seed(rng_seed, index) if layer.kind == "dropout" else None,
            routing=(
                routing.caches.get(layer.name)
                if routing is not None and train and uses_routing(layer)
                else None
            ),
        )
        xs = [values[src] for src in graph.inputs_of(layer)]
        y, cache = fwd(layer, graph.layer_params(layer), xs, ctx)
        if not np.isfinite(y).all():
            raise NonFiniteError(layer.name)
        values[layer.name] = y
        if train:
            tape.caches[layer.name] = cache
            tape.state_updates.update(ctx.state_updates)

    return Tensor(values[graph.output]), tape


def backward(tape: Tape, output_grad: ArrayLike) -> Dict[str, np.ndarray]:
    """Propagate an output gradient back through a recorded forward pass.

    Args:
        tape: Tape from a train-mode forward
        output_grad: Gradient of the objective w.r.t. the graph output

    Returns:
        Gradients keyed by parameter name for every trainable parameter, plus
        ``"input"`` for the gradient w.r.t. the graph input

    Raises:
        TapeError: If the tape comes from an eval-mode forward
        NonFiniteError: If a gradient becomes non-finite
    """
    if not tape.recorded:
        raise TapeError("backward requires a tape recorded by a train-mode forward")
    graph = tape.graph
    dtype = _param_dtype(graph)
    node_grads: Dict[str, np.ndarray] = {graph.output: as_array(output_grad).astype(dtype)}
    grads: Dict[str, np.ndarray] = {}

    for layer in reversed(graph.layers):
        dy = node_grads.pop(layer.name, None)
        if dy is None:
            continue
        _, bwd = KERNELS[layer.kind]
        dxs, dparams = bwd(layer, graph.layer_params(layer), tape.caches[layer.name], dy)
        for src, dx in zip(graph.inputs_of(layer), dxs):
            node_grads[src] = node_grads[src] + dx if src in node_grads else dx
        for slot, g in dparams.items():
            name = f"{layer.name}.{slot}"
            if graph.params[name].requires_grad:
                grads[name] = g

    for name in graph.params.trainable():
        grads.setdefault(name, np.zeros_like(graph.params.array(name)))
    grads[INPUT] = node_grads.get(INPUT, np.zeros(tape.input_shape, dtype=dtype))

    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(name, f"Non-finite gradient for '{name}'")
    return grads


def apply_state_updates(graph: ModelGraph, tape: Tape) -> None:
    """Commit batch-norm running statistics recorded on a train tape."""
    for name, value in tape.state_updates.items():
        graph.params[name] = Tensor(value.astype(graph.params[name].dtype), requires_grad=False)


def _param_dtype(graph: ModelGraph):
    for _, t in graph.params.items():
        return t.dtype
    return np.dtype(np.float64)


def compare_gradients(
    objective: Callable[[], float],
    arrays: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    eps: float,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Each array is perturbed in place and restored afterwards. The error of one
    entry is |a - n| / max(|a|, |n|, 1e-12).

    Args:
        objective: Scalar function of the current array values
        arrays: Arrays to perturb, keyed like ``analytic``
        analytic: Analytic gradients
        eps: Finite-difference step
        max_entries: Check at most this many randomly chosen entries per array
        seed: Seed for the entry sample

    Returns:
        Largest relative error found
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in arrays.items():
        flat_count = arr.size
        if max_entries is not None and flat_count > max_entries:
            picks = rng.choice(flat_count, size=max_entries, replace=False)
        else:
            picks = range(flat_count)
        grad = analytic[name]
        for flat in picks:
            idx = np.unravel_index(int(flat), arr.shape)
            original = arr[idx]
            arr[idx] = original + eps
            f_plus = objective()
            arr[idx] = original - eps
            f_minus = objective()
            arr[idx] = original
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(grad[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


def grad_check(
    graph: ModelGraph,
    input: ArrayLike,
    eps: float = 1e-5,
    rng_seed: int = 0,
    probe_seed: int = 0,
    freeze_routing: bool = True,
    max_entries: Optional[int] = None,
) -> float:
    """Check backward against central finite differences at 64-bit precision.

    The scalar objective is ``sum(output * R)`` with a fixed seeded probe R.
    Dropout masks repeat through the fixed ``rng_seed``; with
    ``freeze_routing`` the ReLU-family masks and pool argmaxes of the
    reference pass are also held fixed.

    Args:
        graph: Graph with float64 parameters
        input: Batch to evaluate at
        eps: Step in [1e-7, 1e-3]
        rng_seed: Dropout seed used for every evaluation
        probe_seed: Seed for the output probe R
        freeze_routing: Reuse routing decisions of the reference pass
        max_entries: Optional per-parameter sample size

    Returns:
        Max relative error over all trainable parameters
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if _param_dtype(graph) != np.float64:
        raise ValueError("grad_check requires float64 parameters")
    x = as_array(input).astype(np.float64)

    out, tape = forward(graph, x, mode="train", rng_seed=rng_seed)
    probe = np.random.default_rng(probe_seed).standard_normal(out.shape)
    analytic = backward(tape, probe)
    reference = tape if freeze_routing else None

    def objective() -> float:
        y, _ = forward(graph, x, mode="train", rng_seed=rng_seed, routing=reference)
        return float(np.sum(y.data * probe))

    arrays = {name: graph.params.array(name) for name in graph.params.trainable()}
    error = compare_gradients(objective, arrays, analytic, eps, max_entries, probe_seed)
    logger.debug(f"grad_check on '{graph.name}': max relative error {error:.3e}")
    return error
