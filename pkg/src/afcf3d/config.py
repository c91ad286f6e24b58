"""Model and training configuration, with the flat ``key=value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class ModelConfig:
    stage_channels: tuple[int, ...] = (64, 64, 128, 256, 512)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2)
    in_channels: int = 3
    reduce_channels: int = 32
    se_ratio: int = 16
    mode: str = "3d"  # "3d": bi-temporal stack along time; "2d": channel concatenation
    afcf: bool = True
    se: bool = True
    afcf_residual: bool = True
    decoder_se: bool = False
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if len(self.stage_channels) != 5 or len(self.blocks_per_stage) != 4:
            raise ConfigurationError("need 5 stage channel counts and 4 residual stage depths")
        if self.mode not in ("3d", "2d"):
            raise ConfigurationError(f"mode must be '3d' or '2d', got {self.mode!r}")
        if min(self.stage_channels) < 1 or self.reduce_channels < 1 or self.se_ratio < 1:
            raise ConfigurationError("channel counts and SE ratio must be positive")

    @property
    def frames(self) -> int:
        return 2 if self.mode == "3d" else 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in {f.name for f in dataclasses.fields(cls)}})


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    tile_size: int = 256
    deterministic: bool = True
    threshold: float = 0.5
    augment: bool = False
    mode: str = "3d"
    stage_channels: tuple[int, ...] = field(default=(64, 64, 128, 256, 512))

    def model_config(self) -> ModelConfig:
        return ModelConfig(stage_channels=self.stage_channels, mode=self.mode, seed=self.seed)


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(value)
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value.strip()


def parse_kv(text: str, cls=TrainConfig):
    """Parse ``key=value`` lines (``#`` comments allowed) over the defaults of ``cls``."""
    cfg = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _coerce(value, getattr(cfg, key)))
        except ValueError:
            raise ConfigurationError(f"config line {lineno}: bad value {value!r} for {key}") from None
    return cfg


def load_kv(path, cls=TrainConfig):
    return parse_kv(Path(path).read_text(), cls)


def dump_kv(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(a) for a in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
