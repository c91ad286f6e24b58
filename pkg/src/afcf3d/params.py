"""Named learnable arrays, their gradients and Adam state."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor


@dataclass
class Entry:
    tensor: Tensor
    adam_m: np.ndarray
    adam_v: np.ndarray

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        if self.tensor.grad is None:
            self.tensor.grad = np.zeros_like(self.tensor.data)
        return self.tensor.grad


@dataclass
class ParamStore:
    """Learnable parameters plus non-learnable buffers (normalization running stats).

    Each parameter lives in a leaf :class:`Tensor` that forward passes use
    directly, so ``backward`` accumulates straight into the store.
    """

    entries: dict[str, Entry] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.entries:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value)
        t = Tensor(value, requires_grad=True, name=name)
        self.entries[name] = Entry(t, np.zeros_like(value), np.zeros_like(value))
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ConfigurationError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.ascontiguousarray(value)
        return self.buffers[name]

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.entries[name].tensor
        except KeyError:
            raise ConfigurationError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.entries if n.startswith(prefix)]

    def count(self, prefix: str = "") -> int:
        return sum(e.value.size for n, e in self.entries.items() if n.startswith(prefix))

    def zero_grad(self) -> None:
        for e in self.entries.values():
            e.tensor.grad = None

    def astype(self, dtype) -> "ParamStore":
        """Deep copy with every array cast to ``dtype`` (used for float64 checks)."""
        out = ParamStore(step=self.step)
        for n, e in self.entries.items():
            out.add(n, e.value.astype(dtype))
            out.entries[n].adam_m[...] = e.adam_m
            out.entries[n].adam_v[...] = e.adam_v
        for n, b in self.buffers.items():
            out.add_buffer(n, b.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        return self.astype(next(iter(self.entries.values())).value.dtype) if self.entries else ParamStore()


def adam_step(params: ParamStore, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One Adam update. Weight decay enters as an L2 term on the gradient."""
    params.step += 1
    t = params.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    step_size = lr / bc1
    for e in params.entries.values():
        p = e.value
        g = e.tensor.grad
        if g is None:
            g = np.zeros_like(p)
        # g becomes a private scratch buffer; the stored gradient is left intact
        g = g + weight_decay * p if weight_decay else g.copy()
        m, v = e.adam_m, e.adam_v
        m *= beta1
        m += (1.0 - beta1) * g
        np.square(g, out=g)
        g *= 1.0 - beta2
        v *= beta2
        v += g
        np.divide(v, bc2, out=g)
        np.sqrt(g, out=g)
        g += eps
        np.divide(m, g, out=g)
        g *= step_size
        p -= g
