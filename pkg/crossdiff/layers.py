"""Parameter creation and the small dense building blocks shared by every module."""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class ParamFactory:
    """
    Creates named, trainable leaf tensors from one seeded generator.

    ``scope`` returns a child factory sharing the generator, so creation order
    (and therefore every initial value) is fixed by the order in which the
    model is assembled.
    """

    def __init__(self, seed: int = 0, prefix: str = "", rng: Optional[np.random.Generator] = None):
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.prefix = prefix

    def scope(self, name: str) -> "ParamFactory":
        prefix = f"{self.prefix}.{name}" if self.prefix else name
        return ParamFactory(prefix=prefix, rng=self.rng)

    def _name(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def normal(self, name: str, shape: Sequence[int], std: float) -> Tensor:
        return Tensor(self.rng.normal(0.0, std, size=tuple(shape)), requires_grad=True, name=self._name(name))

    def weight(self, name: str, fan_in: int, fan_out: int) -> Tensor:
        return self.normal(name, (fan_in, fan_out), std=1.0 / np.sqrt(fan_in))

    def zeros(self, name: str, shape: Sequence[int]) -> Tensor:
        return Tensor(np.zeros(tuple(shape)), requires_grad=True, name=self._name(name))

    def ones(self, name: str, shape: Sequence[int]) -> Tensor:
        return Tensor(np.ones(tuple(shape)), requires_grad=True, name=self._name(name))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = T.matmul(x, weight)
    return out + bias if bias is not None else out


@dataclass
class LinearParams:
    weight: Tensor
    bias: Optional[Tensor] = None

    @classmethod
    def create(cls, factory: ParamFactory, fan_in: int, fan_out: int, bias: bool = True) -> "LinearParams":
        return cls(factory.weight("weight", fan_in, fan_out),
                   factory.zeros("bias", (fan_out,)) if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> List[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass
class MLPParams:
    """Stack of linear layers with ReLU between them (none after the last)."""

    layers: List[LinearParams] = field(default_factory=list)

    @classmethod
    def create(cls, factory: ParamFactory, widths: Sequence[int]) -> "MLPParams":
        if len(widths) < 2:
            raise ShapeError("An MLP needs at least an input and an output width")
        return cls([LinearParams.create(factory.scope(f"layer{i}"), widths[i], widths[i + 1])
                    for i in range(len(widths) - 1)])

    @property
    def in_width(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_width(self) -> int:
        return self.layers[-1].weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, factory: ParamFactory, width: int) -> "NormParams":
        return cls(factory.ones("gain", (width,)), factory.zeros("bias", (width,)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def parameters(self) -> List[Tensor]:
        return [self.gain, self.bias]


def unique_parameters(groups: Iterable[Tuple[str, Iterable[Tensor]]]) -> Dict[str, Tensor]:
    """
    Flatten named parameter groups into one ordered name -> tensor mapping.

    Raises:
        ValueError: a tensor or a name appears twice.
    """
    registry: Dict[str, Tensor] = {}
    seen = set()
    for group, params in groups:
        for p in params:
            name = p.name or f"{group}.{len(registry)}"
            if id(p) in seen:
                raise ValueError(f"Parameter '{name}' registered twice")
            if name in registry:
                raise ValueError(f"Duplicate parameter name '{name}'")
            seen.add(id(p))
            registry[name] = p
    return registry
