"""Reverse-mode autodiff on float64 numpy arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to one gradient per parent.
:func:`backward` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """A non-finite value appeared in an activation or gradient."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class DimensionError(ContractError):
    """Array shapes are incompatible for the requested operation."""


def check_finite(arr: np.ndarray, op: str, what: str = "output") -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite {what} produced by {op}")


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "const"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # Arithmetic sugar; the real work lives in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.mul(other, -1.0))

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


class Param(Tensor):
    """A named learnable array with a zero-initialized gradient slot."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn,
              op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op``; record the graph only if needed."""
    check_finite(data, op)
    parents = tuple(parents)
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable Param.

    Gradients of intermediate nodes are released once propagated.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            check_finite(g, node.op, "gradient")
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None else g
            else:
                parent.grad = parent.grad + g
        node.grad = None
