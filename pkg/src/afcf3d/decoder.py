"""Full-scale decoder: time-axis concatenation of all five levels, FR blocks, head."""
from __future__ import annotations

from . import ops
from .afcf import add_se, se4d
from .config import ModelConfig
from .errors import ConfigurationError, SequencingError
from .layers import add_conv, add_norm, conv, norm
from .params import ParamStore
from .tensor import Tensor

# (kernel, stride, padding) of the three FR convolutions; time goes 10 -> 10 -> 4 -> 2
FR_LAYERS_3D = (
    ((3, 3, 3), (1, 1, 1), (1, 1, 1)),
    ((4, 3, 3), (2, 1, 1), (0, 1, 1)),
    ((3, 1, 1), (1, 1, 1), (0, 0, 0)),
)
FR_LAYERS_2D = (
    ((1, 3, 3), (1, 1, 1), (0, 1, 1)),
    ((1, 3, 3), (1, 1, 1), (0, 1, 1)),
    ((1, 1, 1), (1, 1, 1), (0, 0, 0)),
)


def build_decoder(store: ParamStore, cfg: ModelConfig, rng, dtype) -> None:
    r = cfg.reduce_channels
    layers = FR_LAYERS_3D if cfg.mode == "3d" else FR_LAYERS_2D
    for i in range(4):
        for j, (kernel, _, _) in enumerate(layers):
            # 2-D mode concatenates the five levels along channels instead of time
            cin = 5 * r if (cfg.mode == "2d" and j == 0) else r
            add_conv(store, f"dec{i}.fr{j}", cin, r, kernel, rng, dtype)
            add_norm(store, f"dec{i}.fr{j}.bn", r, dtype)
        if cfg.decoder_se:
            add_se(store, f"dec{i}.se", r, cfg.frames, cfg.se_ratio, rng, dtype)
    add_conv(store, "head", r, 1, (cfg.frames, 1, 1), rng, dtype)


def fullscale_concat(cfg: ModelConfig, af: list[Tensor], dec: dict[int, Tensor], i: int) -> Tensor:
    """``CF^i``: every level resampled to level ``i`` and concatenated in level order 0..4.

    Shallower levels are max-pooled ``i - j`` times; deeper ones are the already
    decoded ``F^j`` (``AF^4`` for the deepest) up-sampled ``2**(j - i)`` times.
    """
    sources = []
    for j in range(5):
        if j < i:
            sources.append(ops.downsample(af[j], i - j))
        elif j == i:
            sources.append(af[i])
        else:
            if j == 4:
                src = af[4]
            elif j in dec:
                src = dec[j]
            else:
                raise SequencingError(f"decoder level {j} must be computed before level {i}")
            sources.append(ops.upsample(src, 2 ** (j - i)))
    return ops.concat_time(sources) if cfg.mode == "3d" else ops.concat_channels(sources)


def fr_block(store: ParamStore, cfg: ModelConfig, i: int, cf: Tensor, train: bool) -> Tensor:
    """Three conv -> norm -> relu layers taking time from 10 back to 2."""
    if cfg.mode == "3d" and cf.shape[2] != 10:
        raise ConfigurationError(f"fr_block expects t=10, got {cf.shape}")
    layers = FR_LAYERS_3D if cfg.mode == "3d" else FR_LAYERS_2D
    y = cf
    for j, (_, stride, pad) in enumerate(layers):
        y = conv(store, f"dec{i}.fr{j}", y, stride=stride, padding=pad)
        y = ops.relu(norm(store, f"dec{i}.fr{j}.bn", y, train))
    if cfg.decoder_se:
        y = se4d(store, f"dec{i}.se", y)
    return y


def predict_head(store: ParamStore, f0: Tensor) -> Tensor:
    """Collapse time, restore full resolution, squash to probabilities ``(n, H, W)``."""
    logits = ops.upsample2x(conv(store, "head", f0))
    p = ops.sigmoid(logits)
    n, _, _, h, w = p.shape
    return ops.reshape(p, (n, h, w))


def decode(store: ParamStore, cfg: ModelConfig, af: list[Tensor], train: bool = True,
           trace: dict | None = None) -> Tensor:
    dec: dict[int, Tensor] = {}
    for i in (3, 2, 1, 0):
        cf = fullscale_concat(cfg, af, dec, i)
        dec[i] = fr_block(store, cfg, i, cf, train)
        if trace is not None:
            trace.setdefault("cf", {})[i] = cf.shape
            trace.setdefault("f", {})[i] = dec[i].shape
    return predict_head(store, dec[0])


def level_shapes(h: int, w: int) -> list[tuple[int, int]]:
    return [(h // 2 ** (i + 1), w // 2 ** (i + 1)) for i in range(5)]

