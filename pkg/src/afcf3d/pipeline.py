"""Training loop with per-epoch validation, evaluation and change-map rendering."""
from __future__ import annotations

import contextlib
import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .config import TrainConfig, dump_kv
from .data import DatasetLayout, SplitArrays, check_disjoint, load_split
from .errors import ConfigurationError, NumericalError
from .losses import loss_components
from .metrics import ConfusionCounts, MetricsReport, binarize, confusion, metrics
from .model import Model, build_model
from .params import adam_step
from .tensorio import checkpoint_bytes, checkpoint_from_bytes, load_checkpoint

LOG_FIELDS = ("epoch", "train_loss", "val_f1", "val_iou", "wall_time")

PALETTE = {
    "tp": (255, 255, 255),
    "fn": (0, 0, 255),
    "fp": (255, 0, 0),
    "tn": (0, 0, 0),
}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_f1: float
    val_iou: float
    wall_time: float

    def row(self) -> list[str]:
        # repr keeps every bit of the float so replayed logs compare exactly
        return [str(self.epoch), repr(self.train_loss), repr(self.val_f1), repr(self.val_iou),
                f"{self.wall_time:.3f}"]


@dataclass
class TrainResult:
    model: Model                 # best-validation weights
    last: Model                  # weights after the final epoch
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float = -1.0
    checkpoint: bytes = b""


def _splits(data, names=("train", "val")) -> list[SplitArrays]:
    if isinstance(data, dict):
        return [data[n] for n in names]
    check_disjoint(DatasetLayout(Path(data)))
    return [load_split(data, n) for n in names]


def _as_input(x: np.ndarray, dtype) -> np.ndarray:
    return x[:, :, None].astype(dtype, copy=False)


def predict_probs(model: Model, a: np.ndarray, b: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Change probabilities ``(N, H, W)`` for image stacks ``(N, 3, H, W)``."""
    out = []
    for s in range(0, len(a), batch_size):
        out.append(model.predict(_as_input(a[s:s + batch_size], model.dtype),
                                 _as_input(b[s:s + batch_size], model.dtype)))
    return np.concatenate(out) if out else np.zeros((0,) + a.shape[2:], model.dtype)


def split_confusion(model: Model, split: SplitArrays, threshold: float = 0.5, batch_size: int = 8) -> ConfusionCounts:
    """Confusion counts accumulated over every pixel of the split."""
    total = ConfusionCounts()
    for s in range(0, len(split), batch_size):
        p = predict_probs(model, split.a[s:s + batch_size], split.b[s:s + batch_size], batch_size)
        total = total + confusion(binarize(p, threshold), split.label[s:s + batch_size])
    return total


def _flip(rng: np.random.Generator, a, b, t):
    if rng.random() < 0.5:
        a, b, t = a[..., ::-1], b[..., ::-1], t[..., ::-1]
    if rng.random() < 0.5:
        a, b, t = a[..., ::-1, :], b[..., ::-1, :], t[..., ::-1, :]
    return np.ascontiguousarray(a), np.ascontiguousarray(b), np.ascontiguousarray(t)


def train(cfg: TrainConfig, data, model: Model | None = None, out_dir=None,
          progress: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Adam on the hybrid loss; keeps the checkpoint with the best validation F1.

    ``data`` is a dataset root or a ``{"train": SplitArrays, "val": SplitArrays}``
    mapping. With ``out_dir`` the run writes ``log.csv``, ``best.afck``,
    ``last.afck`` and ``train.cfg`` there. ``cfg.deterministic`` pins BLAS to
    one thread so that reductions run in a fixed order.
    """
    scope = threadpool_limits(1) if cfg.deterministic else contextlib.nullcontext()
    with scope:
        return _train(cfg, data, model, out_dir, progress)


def _train(cfg: TrainConfig, data, model, out_dir, progress) -> TrainResult:
    train_set, val_set = _splits(data)
    if len(train_set) == 0 and cfg.epochs > 0:
        raise ConfigurationError("training split is empty")
    if model is None:
        model = build_model(cfg.model_config())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train.cfg").write_text(dump_kv(cfg))
    rng = np.random.default_rng([cfg.seed, 1])
    dtype = model.dtype
    result = TrainResult(model=model, last=model, checkpoint=checkpoint_bytes(model))
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for bi, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            a, b, t = train_set.a[idx], train_set.b[idx], train_set.label[idx]
            if cfg.augment:
                a, b, t = _flip(rng, a, b, t)
            p = model(_as_input(a, dtype), _as_input(b, dtype), train=True)
            loss, bce, dice = loss_components(p, t)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {bi}: "
                    f"bce={float(bce.data)!r} dice={float(dice.data)!r}")
            loss.backward()
            adam_step(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
            model.params.zero_grad()
            losses.append(value)
        report = metrics(split_confusion(model, val_set, cfg.threshold, cfg.batch_size))
        rec = EpochRecord(epoch, float(np.mean(losses)), report.f1, report.iou,
                          time.perf_counter() - start)
        result.log.append(rec)
        if report.f1 > result.best_val_f1:
            result.best_val_f1, result.best_epoch = report.f1, epoch
            result.checkpoint = checkpoint_bytes(model)
        if out is not None:
            write_log(out / "log.csv", result.log)
            (out / "best.afck").write_bytes(result.checkpoint)
        if progress is not None:
            progress(rec)
    if out is not None:
        write_log(out / "log.csv", result.log)
        (out / "best.afck").write_bytes(result.checkpoint)
        (out / "last.afck").write_bytes(checkpoint_bytes(model, optimizer=True))
    result.last = model
    if result.best_epoch != cfg.epochs:
        result.model = checkpoint_from_bytes(result.checkpoint, dtype)
    return result


def write_log(path, log: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for rec in log:
            w.writerow(rec.row())


def evaluate(checkpoint, data, split: str = "test", threshold: float = 0.5, batch_size: int = 8) -> MetricsReport:
    """Global-count metrics over a split. ``checkpoint`` is a path or a :class:`Model`."""
    model = checkpoint if isinstance(checkpoint, Model) else load_checkpoint(checkpoint)
    arrays = data if isinstance(data, SplitArrays) else load_split(data, split)
    return metrics(split_confusion(model, arrays, threshold, batch_size))


def render_change_map(pred, label=None) -> np.ndarray:
    """RGB uint8 ``(H, W, 3)``: four-color comparison with a label, white/black without."""
    pred = np.asarray(pred, bool)
    rgb = np.zeros(pred.shape + (3,), np.uint8)
    if label is None:
        rgb[pred] = PALETTE["tp"]
        return rgb
    label = np.asarray(label, bool)
    if label.shape != pred.shape:
        raise ConfigurationError(f"label shape {label.shape} != prediction shape {pred.shape}")
    rgb[pred & label] = PALETTE["tp"]
    rgb[~pred & label] = PALETTE["fn"]
    rgb[pred & ~label] = PALETTE["fp"]
    return rgb


def infer_render(checkpoint, a: np.ndarray, b: np.ndarray, label=None, threshold: float = 0.5):
    """Single pair ``(3, H, W)`` -> ``(render, probability map)``."""
    model = checkpoint if isinstance(checkpoint, Model) else load_checkpoint(checkpoint)
    prob = predict_probs(model, a[None], b[None])[0]
    return render_change_map(binarize(prob, threshold), label), prob
