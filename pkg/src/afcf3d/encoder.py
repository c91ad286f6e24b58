"""Five-stage 3-D ResNet-18 encoder built from (2+1)-D factorized units.

Each 3x3x3 convolution is split into a spatial 1x3x3 convolution, shared by
both acquisition dates, and a temporal 3x1x1 convolution. On a two-frame
input with temporal zero padding the temporal kernel's three layers
``(w1, w2, w3)`` act as::

    out_1 = w2 . in_1 + w3 . in_2
    out_2 = w1 . in_1 + w2 . in_2

which :func:`temporal_fuse` evaluates as three 1x1 channel mixings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .config import ModelConfig
from .errors import ConfigurationError
from .layers import add_conv, add_norm, conv, he_normal, norm
from .params import ParamStore
from .tensor import Tensor, as_tensor, make, record_flops


@dataclass
class TemporalSplitWeights:
    w1: Tensor
    w2: Tensor
    w3: Tensor
    bias: Tensor

    def __post_init__(self):
        if not (self.w1.shape == self.w2.shape == self.w3.shape) or self.w2.ndim != 2:
            raise ConfigurationError("w1, w2, w3 must be matrices of one shape")
        if self.bias.shape != (self.w2.shape[0],):
            raise ConfigurationError("bias length must equal output channels")

    @classmethod
    def from_store(cls, store: ParamStore, name: str) -> "TemporalSplitWeights":
        return cls(store[f"{name}.w1"], store[f"{name}.w2"], store[f"{name}.w3"], store[f"{name}.b"])

    def assembled(self) -> np.ndarray:
        """The equivalent ``kt=3`` temporal kernel, shape ``(O, C, 3, 1, 1)``."""
        k = np.stack([self.w1.data, self.w2.data, self.w3.data], axis=2)
        return k[:, :, :, None, None]


def temporal_fuse(x, tw: TemporalSplitWeights) -> Tensor:
    """Cross-frame 1x1 mixing: shared middle weight, boundary weights add to the other frame."""
    x = as_tensor(x)
    if x.ndim != 5 or x.shape[2] != 2:
        raise ConfigurationError(f"temporal_fuse needs t=2, got shape {x.shape}")
    n, c, _, h, w = x.shape
    w1, w2, w3, b = tw.w1.data, tw.w2.data, tw.w3.data, tw.bias.data
    if w2.shape[1] != c:
        raise ConfigurationError(f"temporal_fuse: input has {c} channels, weights expect {w2.shape[1]}")
    o = w2.shape[0]
    x1 = x.data[:, :, 0].reshape(n, c, h * w)
    x2 = x.data[:, :, 1].reshape(n, c, h * w)
    shared1 = np.matmul(w2, x1)
    shared2 = np.matmul(w2, x2)
    from_first = np.matmul(w1, x1)   # boundary output of frame 1, lands on frame 2
    from_second = np.matmul(w3, x2)  # boundary output of frame 2, lands on frame 1
    y1 = shared1 + from_second + b[:, None]
    y2 = shared2 + from_first + b[:, None]
    out = np.stack([y1, y2], axis=2).reshape(n, o, 2, h, w)
    record_flops("conv3d", 2 * 3 * n * o * c * 2 * h * w + 2 * n * o * h * w)

    def backward(g):
        g1 = g[:, :, 0].reshape(n, o, h * w)
        g2 = g[:, :, 1].reshape(n, o, h * w)
        gx = None
        if x.requires_grad:
            gx1 = np.matmul(w2.T, g1) + np.matmul(w1.T, g2)
            gx2 = np.matmul(w2.T, g2) + np.matmul(w3.T, g1)
            gx = np.stack([gx1, gx2], axis=2).reshape(x.shape)

        def outer(ga, xa):
            return np.matmul(ga, xa.transpose(0, 2, 1)).sum(axis=0)

        gw1 = outer(g2, x1) if tw.w1.requires_grad else None
        gw2 = outer(g1, x1) + outer(g2, x2) if tw.w2.requires_grad else None
        gw3 = outer(g1, x2) if tw.w3.requires_grad else None
        gb = (g1.sum(axis=(0, 2)) + g2.sum(axis=(0, 2))) if tw.bias.requires_grad else None
        return gx, gw1, gw2, gw3, gb

    return make(out, (x, tw.w1, tw.w2, tw.w3, tw.bias), backward)


# ---------------------------------------------------------------------------
# parameters


def add_temporal(store: ParamStore, name: str, cin: int, cout: int, rng, dtype, mode: str) -> None:
    w2 = he_normal(rng, (cout, cin), cin, dtype)
    if mode == "3d":
        store.add(f"{name}.w1", he_normal(rng, (cout, cin), cin, dtype, scale=0.1))
        store.add(f"{name}.w2", w2)
        store.add(f"{name}.w3", he_normal(rng, (cout, cin), cin, dtype, scale=0.1))
    else:
        store.add(f"{name}.w2", w2)
    store.add(f"{name}.b", np.zeros(cout, dtype=dtype))


def temporal(store: ParamStore, name: str, x: Tensor) -> Tensor:
    if f"{name}.w1" in store:
        return temporal_fuse(x, TemporalSplitWeights.from_store(store, name))
    # single-frame (2-D) variant: the temporal kernel collapses to its middle layer
    w2 = store[f"{name}.w2"]
    return ops.conv3d(x, ops.reshape(w2, w2.shape + (1, 1, 1)), store[f"{name}.b"])


def _add_unit(store, name, cin, cout, rng, dtype, mode):
    add_conv(store, f"{name}.conv", cin, cout, (1, 3, 3), rng, dtype, bias=False)
    add_norm(store, f"{name}.bn1", cout, dtype)
    add_temporal(store, f"{name}.tf", cout, cout, rng, dtype, mode)
    add_norm(store, f"{name}.bn2", cout, dtype)


def build_encoder(store: ParamStore, cfg: ModelConfig, rng, dtype) -> None:
    ch = cfg.stage_channels
    cin = cfg.in_channels * (2 if cfg.mode == "2d" else 1)
    add_conv(store, "enc.stem.conv", cin, ch[0], (1, 7, 7), rng, dtype, bias=False)
    add_norm(store, "enc.stem.bn1", ch[0], dtype)
    add_temporal(store, "enc.stem.tf", ch[0], ch[0], rng, dtype, cfg.mode)
    add_norm(store, "enc.stem.bn2", ch[0], dtype)
    for s in range(1, 5):
        for b in range(cfg.blocks_per_stage[s - 1]):
            c_in = ch[s - 1] if b == 0 else ch[s]
            stride = 2 if (b == 0 and s > 1) else 1
            name = f"enc.s{s}.b{b}"
            _add_unit(store, f"{name}.u1", c_in, ch[s], rng, dtype, cfg.mode)
            _add_unit(store, f"{name}.u2", ch[s], ch[s], rng, dtype, cfg.mode)
            if stride != 1 or c_in != ch[s]:
                add_conv(store, f"{name}.proj", c_in, ch[s], (1, 1, 1), rng, dtype, bias=False)
                add_norm(store, f"{name}.proj_bn", ch[s], dtype)


# ---------------------------------------------------------------------------
# forward


def factorized_unit(store: ParamStore, name: str, x: Tensor, stride: int, train: bool) -> Tensor:
    """1x3x3 spatial conv -> norm -> relu -> temporal fuse -> norm."""
    y = conv(store, f"{name}.conv", x, stride=(1, stride, stride), padding=(0, 1, 1))
    y = ops.relu(norm(store, f"{name}.bn1", y, train))
    y = temporal(store, f"{name}.tf", y)
    return norm(store, f"{name}.bn2", y, train)


def block21d(store: ParamStore, name: str, x: Tensor, stride: int, train: bool) -> Tensor:
    """ResNet basic block made of two factorized units."""
    out = ops.relu(factorized_unit(store, f"{name}.u1", x, stride, train))
    out = factorized_unit(store, f"{name}.u2", out, 1, train)
    if f"{name}.proj.w" in store:
        shortcut = norm(store, f"{name}.proj_bn", conv(store, f"{name}.proj", x, stride=(1, stride, stride)), train)
    else:
        shortcut = x
    if shortcut.shape != out.shape:
        raise ConfigurationError(f"{name}: shortcut shape {shortcut.shape} != residual shape {out.shape}")
    return ops.relu(ops.add(out, shortcut))


def stack_inputs(i1, i2, cfg: ModelConfig) -> Tensor:
    i1, i2 = as_tensor(i1), as_tensor(i2)
    if i1.shape != i2.shape:
        raise ConfigurationError(f"image shapes differ: {i1.shape} vs {i2.shape}")
    if i1.ndim == 4:  # (n, c, h, w) images
        i1 = ops.reshape(i1, i1.shape[:2] + (1,) + i1.shape[2:])
        i2 = ops.reshape(i2, i2.shape[:2] + (1,) + i2.shape[2:])
    if i1.ndim != 5 or i1.shape[2] != 1:
        raise ConfigurationError(f"images must be (n,c,h,w) or (n,c,1,h,w), got {i1.shape}")
    if i1.shape[1] != cfg.in_channels:
        raise ConfigurationError(f"expected {cfg.in_channels} bands, got {i1.shape[1]}")
    h, w = i1.shape[3:]
    if h % 32 or w % 32:
        raise ConfigurationError(f"spatial size {h}x{w} must be divisible by 32")
    return ops.concat_time([i1, i2]) if cfg.mode == "3d" else ops.concat_channels([i1, i2])


def encode(store: ParamStore, cfg: ModelConfig, i1, i2, train: bool = True) -> list[Tensor]:
    """Return the five stage outputs, highest resolution first."""
    x = stack_inputs(i1, i2, cfg)
    y = conv(store, "enc.stem.conv", x, stride=(1, 2, 2), padding=(0, 3, 3))
    y = ops.relu(norm(store, "enc.stem.bn1", y, train))
    y = temporal(store, "enc.stem.tf", y)
    f0 = ops.relu(norm(store, "enc.stem.bn2", y, train))
    feats = [f0]
    y = ops.pool_spatial(f0, "max", 3, 2, padding=1)
    for s in range(1, 5):
        for b in range(cfg.blocks_per_stage[s - 1]):
            stride = 2 if (b == 0 and s > 1) else 1
            y = block21d(store, f"enc.s{s}.b{b}", y, stride, train)
        feats.append(y)
    return feats
