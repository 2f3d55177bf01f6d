"""Tensor values and the reverse-mode gradient tape."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised for malformed gradient graphs (non-scalar root, cycles)."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense array plus the bookkeeping needed for backpropagation.

    A tensor produced by an operation remembers its inputs (``parents``) and
    a closure mapping the output gradient to one gradient per parent. Leaves
    created with ``requires_grad=True`` receive ``.grad`` after
    :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        op: str = "leaf",
        name: Optional[str] = None,
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # arithmetic used by the network and by tests
    def __add__(self, other):
        from . import ops

        return ops.add(self, as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, as_tensor(-1.0, self.dtype))

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def sum(self):
        from . import ops

        return ops.sum_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def make_result(
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str,
) -> Tensor:
    """Wrap an op output, recording it on the tape when any input needs grad."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    parents = tuple(parents)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` ordered so each node precedes its parents."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color: dict = {}
    order: list = []
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        key = id(node)
        if done:
            color[key] = BLACK
            order.append(node)
            continue
        state = color.get(key, WHITE)
        if state == BLACK:
            continue
        if state == GRAY:
            raise GraphError("cycle detected in gradient graph")
        color[key] = GRAY
        stack.append((node, True))
        for parent in node.parents:
            pstate = color.get(id(parent), WHITE)
            if pstate == GRAY:
                raise GraphError("cycle detected in gradient graph")
            if pstate == WHITE and parent.requires_grad:
                stack.append((parent, False))
    order.reverse()
    return order


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) to every leaf that requires grad.

    Leaf gradients accumulate into ``.grad`` (summed over all consumers).
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in topological_order(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
