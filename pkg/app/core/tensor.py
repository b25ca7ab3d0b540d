from collections.abc import Iterator
from dataclasses import dataclass
from typing import Dict, List, Tuple, Union

import numpy as np

from app.core.errors import ShapeError

ArrayLike = Union[np.ndarray, "Tensor"]

SUPPORTED_DTYPES = (np.float32, np.float64)


@dataclass
class Tensor:
    """Dense float tensor with a gradient flag.

    The data buffer is always C-contiguous and either float32 or float64, so
    ``data.size == prod(shape)`` holds by construction.
    """

    data: np.ndarray
    requires_grad: bool = False

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data)
        if data.dtype.type not in SUPPORTED_DTYPES:
            data = data.astype(np.float64)
        if any(dim <= 0 for dim in data.shape):
            raise ShapeError(f"Tensor dimensions must be positive, got {data.shape}")
        self.data = data

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), self.requires_grad)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad)


def as_array(value: ArrayLike) -> np.ndarray:
    """Return the ndarray behind a Tensor, or the array itself."""
    return value.data if isinstance(value, Tensor) else np.asarray(value)


class ParamStore:
    """Ordered mapping of parameter names to tensors.

    Names follow ``<layer>.<slot>`` (``conv1.weight``, ``bn1.running_mean``).
    Buffers such as batch-norm running statistics are stored with
    ``requires_grad=False`` and are never touched by an optimizer.
    """

    def __init__(self, tensors: Dict[str, Tensor] | None = None) -> None:
        self._tensors: Dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, tensor: Tensor) -> None:
        self._tensors[name] = tensor

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> List[str]:
        return list(self._tensors)

    def trainable(self) -> List[str]:
        """Names of parameters that receive gradients."""
        return [name for name, t in self._tensors.items() if t.requires_grad]

    def array(self, name: str) -> np.ndarray:
        return self._tensors[name].data

    def num_parameters(self, trainable_only: bool = True) -> int:
        return sum(
            t.data.size for t in self._tensors.values()
            if t.requires_grad or not trainable_only
        )

    def copy(self) -> "ParamStore":
        return ParamStore({name: t.copy() for name, t in self._tensors.items()})

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({name: t.astype(dtype) for name, t in self._tensors.items()})

    def freeze(self) -> "ParamStore":
        """Copy with every tensor marked non-trainable."""
        return ParamStore({
            name: Tensor(t.data.copy(), requires_grad=False)
            for name, t in self._tensors.items()
        })

    def equals(self, other: "ParamStore") -> bool:
        """Bit-exact comparison of names, dtypes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.dtype == other[name].dtype and np.array_equal(a.data, other[name].data)
            for name, a in self._tensors.items()
        )
