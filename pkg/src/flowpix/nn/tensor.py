"""Dense tensors with tape-free reverse-mode differentiation.

Every op result keeps references to its inputs and a closure that pushes the
upstream gradient back to them. ``Tensor.backward`` walks that graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class GraphError(RuntimeError):
    """Raised when backward is requested on something that was never recorded."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._backward is None:
            raise GraphError("backward called on a tensor with no recorded forward pass")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        for node in order:
            if node is not self and node._backward is not None:
                node.grad = None
        self.grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape).copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from flowpix.nn import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from flowpix.nn import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from flowpix.nn import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from flowpix.nn import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from flowpix.nn import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from flowpix.nn import ops
        return ops.matmul(self, other)


class Parameter(Tensor):
    """A named model weight. Non-trainable parameters hold buffers such as running stats."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def make_result(data: np.ndarray, parents: Sequence[Tensor],
                backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op output, recording the graph edge only when some input needs it."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, parameters: Iterable[Parameter]) -> None:
    """Populate ``grad`` on every trainable parameter from a scalar loss.

    Trainable parameters the loss does not depend on receive zero gradients;
    non-trainable ones are left untouched.
    """
    params = list(parameters)
    for p in params:
        if p.trainable:
            p.grad = None
    loss.backward()
    for p in params:
        if p.trainable and p.grad is None:
            p.grad = np.zeros_like(p.data)
