"""Named parameter collections and initializers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Parameter


class ParameterSet:
    """Ordered name -> Parameter mapping that rejects duplicate names.

    Registering the *same* Parameter object twice under its own name is a
    no-op, which is how shared projections stay a single entry.
    """

    def __init__(self):
        self._params: OrderedDict[str, Parameter] = OrderedDict()

    def add(self, p: Parameter) -> Parameter:
        existing = self._params.get(p.name)
        if existing is not None:
            if existing is p:
                return p
            raise ValueError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self._params.items())

    def count(self) -> int:
        return sum(p.size for p in self._params.values())


def glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
