"""Tape-based reverse-mode differentiation over dense numpy arrays.

Each :class:`Tensor` produced by an op remembers its parents and a closure
mapping the upstream gradient to one gradient per parent.  Calling
:meth:`Tensor.backward` on a scalar walks that graph once in reverse
topological order, writes ``.grad`` on every leaf that requires it and then
releases the graph.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from mcta.errors import DimensionError, TapeStateError

_default_dtype = np.dtype(np.float32)
_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported tensor dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with.

    ``with default_dtype(np.float64): ...`` is how gradient checks run.
    """
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording, e.g. for evaluation passes."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float array that can take part in a gradient tape.

    Leaf tensors (parameters, inputs) are built directly; every other tensor
    is the output of one of the functions in :mod:`mcta.autograd.ops`.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.array(data, dtype=dtype or _default_dtype, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._retain = False
        self._released = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._retain = False
        out._released = False
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def retain_grad(self) -> "Tensor":
        """Ask backward to also store ``.grad`` on this intermediate tensor."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Thin operator sugar; the real definitions live in ops.
    def __add__(self, other):
        from mcta.autograd import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from mcta.autograd import ops

        return ops.hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from mcta.autograd import ops

        return ops.divide(self, other)

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf that requires it.

        Raises:
            DimensionError: if this tensor is not a scalar.
            TapeStateError: if the graph was already consumed by an earlier
                backward, or a reachable leaf still holds a gradient from a
                previous step that was never reset.
        """
        if self.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise TapeStateError("backward already ran on this graph; rebuild it with a new forward pass")
        if not self.requires_grad:
            raise TapeStateError("loss does not depend on any tensor that requires grad")

        order = _topological_order(self)
        for node in order:
            if node._released:
                raise TapeStateError("graph shares nodes with an already-consumed backward pass")
            if node.is_leaf and node.grad is not None:
                label = node.name or repr(node)
                raise TapeStateError(f"{label} still holds a gradient; reset grads before the next backward")

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is not None and (node.is_leaf or node._retain):
                node.grad = g
            if node._backward is not None and g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._released = True


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Wrap arrays and python scalars as constant tensors."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)
