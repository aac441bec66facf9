"""Reverse-mode autodiff over float64 numpy arrays."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError

__all__ = ["Tensor", "as_tensor", "backward", "no_grad_value", "accumulate"]


class Tensor:
    """Graph node: a float64 array plus the closure that back-propagates into its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar; the op implementations live in ``ops``
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def no_grad_value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, grad=None):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    ``root`` must be a scalar unless an explicit output gradient is given.
    """
    if grad is None:
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {root.shape}")
        grad = np.ones_like(root.data)
    if not root.requires_grad:
        return
    root.grad = np.asarray(grad, dtype=np.float64).reshape(root.shape)
    for node in reversed(_topo_order(root)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior nodes only; leaves carry no closure and keep their grad
            node.grad = None
