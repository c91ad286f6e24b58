"""Adjacent-level feature cross-fusion and the time-folded SE gate."""
from __future__ import annotations

import numpy as np

from . import ops
from .config import ModelConfig
from .errors import ConfigurationError
from .layers import add_conv, conv, he_normal
from .params import ParamStore
from .tensor import Tensor


def se_width(c: int, t: int, ratio: int) -> int:
    return max(1, (c * t) // ratio)


def add_se(store: ParamStore, name: str, c: int, t: int, ratio: int, rng, dtype) -> None:
    ct = c * t
    mid = se_width(c, t, ratio)
    store.add(f"{name}.w_down", he_normal(rng, (mid, ct), ct, dtype))
    store.add(f"{name}.b_down", np.zeros(mid, dtype=dtype))
    store.add(f"{name}.w_up", he_normal(rng, (ct, mid), mid, dtype))
    store.add(f"{name}.b_up", np.zeros(ct, dtype=dtype))


def _fc(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ops.conv3d(x, ops.reshape(w, w.shape + (1, 1, 1)), b)


def se_gate(store: ParamStore, name: str, folded: Tensor) -> Tensor:
    """Per-(sample, channel) gate in (0, 1) from globally pooled statistics."""
    z = ops.global_avg_pool_hw(folded)
    z = ops.relu(_fc(z, store[f"{name}.w_down"], store[f"{name}.b_down"]))
    return ops.sigmoid(_fc(z, store[f"{name}.w_up"], store[f"{name}.b_up"]))


def se4d(store: ParamStore, name: str, f: Tensor) -> Tensor:
    """Fold time into channels, gate with squeeze-and-excitation, unfold."""
    n, c, t, h, w = f.shape
    folded = ops.reshape(f, (n, c * t, 1, h, w))
    gated = ops.mul(folded, se_gate(store, name, folded))
    return ops.reshape(gated, (n, c, t, h, w))


def build_afcf(store: ParamStore, cfg: ModelConfig, rng, dtype) -> None:
    r = cfg.reduce_channels
    for i, c in enumerate(cfg.stage_channels):
        add_conv(store, f"afcf.reduce{i}", c, r, (1, 1, 1), rng, dtype)
    for i in range(5):
        if cfg.afcf:
            kernel = (3, 3, 3) if cfg.mode == "3d" else (1, 3, 3)
            add_conv(store, f"afcf.fuse{i}", r, r, kernel, rng, dtype)
        if cfg.se:
            add_se(store, f"afcf.se{i}", r, cfg.frames, cfg.se_ratio, rng, dtype)


def channel_reduce(store: ParamStore, feats: list[Tensor]) -> list[Tensor]:
    if len(feats) != 5:
        raise ConfigurationError(f"expected five stage features, got {len(feats)}")
    return [conv(store, f"afcf.reduce{i}", f) for i, f in enumerate(feats)]


def resample_adjacent(fhat: list[Tensor], i: int) -> tuple[Tensor | None, Tensor | None]:
    """Neighbours of level ``i`` brought to its resolution (absent at the ends)."""
    if not 0 <= i <= 4:
        raise ConfigurationError(f"level {i} outside 0..4")
    prev = ops.pool_spatial(fhat[i - 1], "max", 2, 2) if i >= 1 else None
    nxt = ops.upsample2x(fhat[i + 1]) if i <= 3 else None
    return prev, nxt


def cross_fuse(store: ParamStore, cfg: ModelConfig, i: int, fhat_i: Tensor,
               prev: Tensor | None = None, nxt: Tensor | None = None) -> Tensor:
    """``AF^i``: sum the present branches, 3x3x3 conv, SE, plus the untouched current level.

    The ablation switches in ``cfg`` drop the neighbours and fusion conv
    (``afcf=False``), the SE gate (``se=False``) or the residual
    (``afcf_residual=False``).
    """
    if not cfg.afcf:
        return se4d(store, f"afcf.se{i}", fhat_i) if cfg.se else fhat_i
    s = fhat_i
    for branch in (prev, nxt):
        if branch is None:
            continue
        if branch.shape != fhat_i.shape:
            raise ConfigurationError(f"level {i}: branch shape {branch.shape} != {fhat_i.shape}")
        s = ops.add(s, branch)
    pad = (1, 1, 1) if cfg.mode == "3d" else (0, 1, 1)
    y = conv(store, f"afcf.fuse{i}", s, padding=pad)
    if cfg.se:
        y = se4d(store, f"afcf.se{i}", y)
    return ops.add(fhat_i, y) if cfg.afcf_residual else y


def afcf_forward(store: ParamStore, cfg: ModelConfig, feats: list[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
    fhat = channel_reduce(store, feats)
    af = []
    for i in range(5):
        prev, nxt = resample_adjacent(fhat, i)
        af.append(cross_fuse(store, cfg, i, fhat[i], prev, nxt))
    return fhat, af
