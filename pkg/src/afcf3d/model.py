"""End-to-end network assembly: parameters, forward pass, complexity."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as _t
from .afcf import afcf_forward, build_afcf
from .config import ModelConfig
from .decoder import build_decoder, decode
from .encoder import build_encoder, encode
from .params import ParamStore
from .tensor import Tensor


@dataclass
class Model:
    config: ModelConfig
    params: ParamStore = field(repr=False)

    def __call__(self, i1, i2, train: bool = True) -> Tensor:
        return forward(self.params, self.config, i1, i2, train)

    def predict(self, i1, i2) -> np.ndarray:
        with _t.no_grad():
            dtype = self.dtype
            return forward(self.params, self.config, np.asarray(i1, dtype), np.asarray(i2, dtype), train=False).data

    @property
    def dtype(self):
        return next(iter(self.params.entries.values())).value.dtype


def build_model(cfg: ModelConfig | None = None, dtype=np.float32, seed: int | None = None) -> Model:
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    store = ParamStore()
    build_encoder(store, cfg, rng, dtype)
    build_afcf(store, cfg, rng, dtype)
    build_decoder(store, cfg, rng, dtype)
    return Model(cfg, store)


def forward(store: ParamStore, cfg: ModelConfig, i1, i2, train: bool = True, trace: dict | None = None) -> Tensor:
    """Image pair -> change probabilities ``(n, H, W)``.

    ``trace`` (optional dict) receives the shapes of every intermediate level.
    """
    feats = encode(store, cfg, i1, i2, train)
    fhat, af = afcf_forward(store, cfg, feats)
    if trace is not None:
        trace["encoder"] = [f.shape for f in feats]
        trace["reduced"] = [f.shape for f in fhat]
        trace["fused"] = [f.shape for f in af]
    return decode(store, cfg, af, train, trace)


def count_params(store: ParamStore, prefix: str = "") -> int:
    return store.count(prefix)


def count_complexity(model: Model, input_size: int | tuple[int, int] = 256, batch: int = 1) -> tuple[int, int]:
    """Exact parameter count and FLOPs of one forward pass.

    A multiply-accumulate counts as 2 FLOPs; normalizations count 4 per
    element and other elementwise ops 1 to 4 per element.
    """
    h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
    x = np.zeros((batch, model.config.in_channels, 1, h, w), dtype=model.dtype)
    with _t.no_grad(), _t.count_flops() as counter:
        forward(model.params, model.config, x, x, train=False)
    return count_params(model.params), counter.total
