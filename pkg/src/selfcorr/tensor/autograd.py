"""Tape-free reverse-mode autodiff over numpy arrays.

Every op result records its parents and a vector-Jacobian closure. Node ids
come from a global counter, so a parent always has a smaller id than its
child and sorting by id gives a topological order.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class GraphError(RuntimeError):
    """Raised on an invalid backward call."""


class ShapeError(ValueError):
    """Dimension mismatch in an op, with the offending axis named."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: mismatch on axis '{axis}' (expected {expected}, got {got})")


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it.

    ``dims`` is the shape; images use ``C x H x W`` and batches prepend an
    ``N`` axis. ``grad`` is filled by :meth:`backward` for every node that
    the loss depends on.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "id", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.id = next(_ids)
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    @classmethod
    def _from_op(cls, data, parents: Sequence["Tensor"], vjp: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.id = next(_ids)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the real ops live in ops.py
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __mul__(self, other):
        from .ops import mul, scale
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import scale
        return scale(self, -1.0)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``node.grad`` for all ancestors.

        Nodes are visited in decreasing id order, and each node's parents
        receive contributions in their recorded order, so the floating-point
        summation order is fixed.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got dims {self.dims}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node.id in nodes:
                continue
            nodes[node.id] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        pending = {self.id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = pending.pop(nid, None)
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            grads = node._vjp(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in pending:
                    pending[parent.id] = pending[parent.id] + pg
                else:
                    pending[parent.id] = pg


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
