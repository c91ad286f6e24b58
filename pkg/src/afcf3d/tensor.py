"""Reverse-mode autodiff core.

A ``Tensor`` wraps a numpy array. Operations in :mod:`afcf3d.ops` build a
graph by calling :func:`make`, handing it the forward result, the parent
tensors and a closure mapping the upstream gradient to one gradient per
parent. ``Tensor.backward`` walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import NumericalError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise NumericalError as soon as any op produces NaN or Inf."""
    prev = _get("checked", False)
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = prev


class FlopCounter:
    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, flops: int) -> None:
        self.total += int(flops)
        self.by_op[op] = self.by_op.get(op, 0) + int(flops)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    prev = _get("flops", None)
    _state.flops = counter
    try:
        yield counter
    finally:
        _state.flops = prev


@contextlib.contextmanager
def record_branches():
    """Collect the discrete choices (ReLU masks, max-pool winners, clamps) made by ops.

    Two evaluations with equal records lie on the same smooth piece of the function.
    """
    log: list[np.ndarray] = []
    prev = _get("branches", None)
    _state.branches = log
    try:
        yield log
    finally:
        _state.branches = prev


def record_branch(choice: np.ndarray) -> None:
    log = _get("branches", None)
    if log is not None:
        log.append(np.array(choice, copy=True))


def record_flops(op: str, flops: int) -> None:
    counter = _get("flops", None)
    if counter is not None:
        counter.add(op, flops)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype).reshape(self.shape))
        for node in reversed(order):
            fn = node._backward
            if fn is None:
                continue
            g = node.grad
            # free intermediate state as soon as it has been consumed
            node.grad = None
            node._backward = None
            parents = node._parents
            node._parents = ()
            if g is None:
                continue
            grads = fn(g)
            for parent, pg in zip(parents, grads):
                if pg is not None and parent.requires_grad:
                    parent._accumulate(pg)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op result, recording the graph edge when gradients are needed."""
    if _get("checked", False) and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced (shape {data.shape})")
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out
