"""BCE + Dice hybrid loss on change probabilities."""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigurationError
from .tensor import Tensor, as_tensor, make, record_branch

BCE_CLAMP = 1e-7
DICE_EPS = 1e-7


def _target(p: Tensor, t) -> np.ndarray:
    t = np.asarray(t)
    if t.shape != p.shape:
        raise ConfigurationError(f"prediction shape {p.shape} != target shape {t.shape}")
    return t.astype(p.dtype, copy=False)


def bce_loss(p, t) -> Tensor:
    """Mean binary cross-entropy; ``p`` is clamped to ``[1e-7, 1 - 1e-7]``."""
    p = as_tensor(p)
    t = _target(p, t)
    n = p.data.size
    pc = np.clip(p.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -np.mean(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    inside = (p.data >= BCE_CLAMP) & (p.data <= 1.0 - BCE_CLAMP)
    record_branch(inside)

    def backward(g):
        return (g * np.where(inside, (pc - t) / (pc * (1.0 - pc)), 0.0) / n,)

    return make(np.asarray(loss, dtype=p.dtype), (p,), backward)


def dice_loss(p, t) -> Tensor:
    """``1 - (2 sum(t p) + eps) / (sum(t) + sum(p) + eps)`` over the whole batch."""
    p = as_tensor(p)
    t = _target(p, t)
    inter = float(np.sum(t * p.data, dtype=np.float64))
    denom = float(np.sum(t, dtype=np.float64) + np.sum(p.data, dtype=np.float64)) + DICE_EPS
    num = 2.0 * inter + DICE_EPS
    loss = 1.0 - num / denom

    def backward(g):
        return (g * (-(2.0 * t * denom - num) / denom ** 2),)

    return make(np.asarray(loss, dtype=p.dtype), (p,), backward)


def hybrid_loss(p, t) -> Tensor:
    return ops.add(bce_loss(p, t), dice_loss(p, t))


def loss_components(p, t) -> tuple[Tensor, Tensor, Tensor]:
    b, d = bce_loss(p, t), dice_loss(p, t)
    return ops.add(b, d), b, d
