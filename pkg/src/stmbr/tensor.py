"""Dense tensor with reverse-mode gradient recording.

A ``Tensor`` wraps a numpy array.  Every primitive in :mod:`stmbr.ops` returns
a new tensor that remembers its parents and a closure that maps the output
gradient to parent gradients.  :func:`backward` walks that record in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class GraphError(RuntimeError):
    """Raised when the recorded graph cannot be differentiated."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (used for frozen paths)."""
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
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar; definitions live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.mul(as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    return arr


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap ``data`` as the output of a recorded primitive."""
    check_finite(data, op)
    out = Tensor(data)
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        out.name = op
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError("cycle detected in recorded graph")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad:
                ps = state.get(id(p))
                if ps == 1:
                    raise GraphError("cycle detected in recorded graph")
                if ps is None:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    If ``wrt`` is given, returns one gradient array per entry, zero-filled for
    tensors the loss does not depend on.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss has no forward record (nothing requires grad)")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise GraphError(f"gradient shape {pg.shape} != primal shape {p.shape} in {node.name}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg

    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
