"""Named parameter registry and the small module base the layers build on."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from ..errors import ShapeError
from . import ops
from .tensor import DEFAULT_DTYPE, Tensor


class ParamStore:
    """Ordered ``name -> Tensor`` map; iteration yields the tensors."""

    def __init__(self) -> None:
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def subset(self, prefix: str) -> ParamStore:
        sub = ParamStore()
        sub._params = OrderedDict((k, v) for k, v in self._params.items() if k.startswith(prefix))
        return sub

    def numel(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ShapeError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self._params.items():
            a = np.asarray(arrays[k])
            if a.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {a.shape} != model shape {p.shape}")
            p.data = a.astype(p.dtype, copy=True)


class Module:
    """Owns child modules and leaf parameters; names are dotted paths."""

    def __init__(self) -> None:
        self._children: OrderedDict[str, Module] = OrderedDict()
        self._own: OrderedDict[str, Tensor] = OrderedDict()

    def register(self, name: str, child: Module) -> Module:
        self._children[name] = child
        return child

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._own[name] = t
        return t

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._own.items():
            yield prefix + name, t
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def param_store(self, prefix: str = "") -> ParamStore:
        store = ParamStore()
        for name, t in self.named_parameters(prefix):
            store.add(name, t)
        return store

    def zero_(self) -> None:
        """Set every parameter to zero (used to exercise residual identities)."""
        for _, t in self.named_parameters():
            t.data = np.zeros_like(t.data)


def kaiming_uniform(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=DEFAULT_DTYPE, a: float = np.sqrt(5.0)
) -> np.ndarray:
    """He-uniform init for a leaky-ReLU slope ``a``; the default a=sqrt(5) gives 1/sqrt(fan_in)."""
    gain = np.sqrt(2.0 / (1.0 + a * a))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """k x k convolution, stride 1, "same" zero padding."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE, bias: bool = True):
        super().__init__()
        self.cin, self.cout, self.k = cin, cout, k
        self.weight = self.param("weight", kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bias = self.param("bias", np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=1, padding=self.k // 2)

    @staticmethod
    def count(cin: int, cout: int, k: int, bias: bool = True) -> int:
        return cout * cin * k * k + (cout if bias else 0)
