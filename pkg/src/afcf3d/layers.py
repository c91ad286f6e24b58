"""Parameter creation and the small conv/norm helpers shared by all network parts."""
from __future__ import annotations

import numpy as np

from . import ops
from .params import ParamStore
from .tensor import Tensor


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype, scale: float = 1.0) -> np.ndarray:
    return (rng.standard_normal(shape) * (scale * np.sqrt(2.0 / fan_in))).astype(dtype)


def add_conv(store: ParamStore, name: str, cin: int, cout: int, kernel, rng, dtype, bias: bool = True) -> None:
    kernel = tuple(kernel)
    fan_in = cin * int(np.prod(kernel))
    store.add(f"{name}.w", he_normal(rng, (cout, cin) + kernel, fan_in, dtype))
    if bias:
        store.add(f"{name}.b", np.zeros(cout, dtype=dtype))


def conv(store: ParamStore, name: str, x: Tensor, stride=1, padding=0) -> Tensor:
    b = f"{name}.b"
    return ops.conv3d(x, store[f"{name}.w"], store[b] if b in store else None, stride, padding)


def add_norm(store: ParamStore, name: str, c: int, dtype) -> None:
    store.add(f"{name}.g", np.ones(c, dtype=dtype))
    store.add(f"{name}.b", np.zeros(c, dtype=dtype))
    store.add_buffer(f"{name}.mean", np.zeros(c, dtype=dtype))
    store.add_buffer(f"{name}.var", np.ones(c, dtype=dtype))


def norm(store: ParamStore, name: str, x: Tensor, train: bool) -> Tensor:
    return ops.normalize(
        x, store[f"{name}.g"], store[f"{name}.b"], "train" if train else "eval",
        store.buffers[f"{name}.mean"], store.buffers[f"{name}.var"],
    )
