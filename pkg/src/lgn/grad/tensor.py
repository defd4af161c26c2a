"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside any tape nothing is recorded, so
evaluation code pays no bookkeeping cost::

    with Tape() as tape:
        loss = ops.sum(ops.hadamard(x, y))
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import DimensionError, ShapeError, TapeError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data if data.dtype == np.float64 else data.astype(np.float64)
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, _as_tensor(other))

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _as_tensor(other))

    def __mul__(self, other):
        from . import ops

        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.hadamard(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, _as_tensor(other))


class Parameter(Tensor):
    """A named trainable tensor. ``requires_grad`` is False for frozen tables."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, requires_grad: bool = True):
        if not name:
            raise ValueError("parameter name must be non-empty")
        super().__init__(data, requires_grad=requires_grad)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "adjoint", "name")

    def __init__(self, out: Tensor, inputs: tuple, adjoint: Callable, name: str):
        self.out = out
        self.inputs = inputs
        self.adjoint = adjoint
        self.name = name


class Tape:
    """Ordered record of executed operations, replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self.replayed = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            raise TapeError("tapes must be exited in LIFO order")

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._tape = None
        self.nodes = []
        self.consumed = False
        self.replayed = 0

    def record(self, out: Tensor, inputs: tuple, adjoint: Callable, name: str) -> None:
        out.requires_grad = True
        out._tape = self
        self.nodes.append(_Node(out, inputs, adjoint, name))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape (detached loss)")
        if self.consumed:
            raise TapeError("backward already ran on this tape; call reset() first")

        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t._tape is None and t.grad is None:
                    t.grad = np.zeros_like(t.data)

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        replayed = 0
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            replayed += 1
            if g is None:
                continue
            grads = node.adjoint(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise DimensionError(
                        f"adjoint of {node.name} produced {gi.shape}, expected {t.data.shape}"
                    )
                if t._tape is None:
                    t.grad += gi
                elif t._tape is self:
                    prev = pending.get(id(t))
                    pending[id(t)] = gi if prev is None else prev + gi
        self.replayed = replayed
        self.consumed = True


def record(data: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable, name: str) -> Tensor:
    """Wrap ``data`` as an op output, recording ``adjoint`` when a gradient is needed.

    ``adjoint(g)`` receives the output cotangent and returns one array (or None)
    per input.
    """
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is None:
        return out
    inputs = tuple(inputs)
    live = False
    for t in inputs:
        if t.requires_grad:
            if t._tape is not None and t._tape is not tape:
                raise TapeError(f"{name}: input was recorded on a different tape")
            live = True
    if live:
        tape.record(out, inputs, adjoint, name)
    return out


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss is not connected to a tape (detached loss)")
    loss._tape.backward(loss)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
