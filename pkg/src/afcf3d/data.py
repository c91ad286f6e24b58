"""Tile dataset ingestion and the synthetic change-pair generator.

Layout: ``root/{A,B,label}/<name>.png`` plus one manifest per split
(``root/<split>.txt``, one tile name per line).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, IngestionError

SPLITS = ("train", "val", "test")
SUBDIRS = ("A", "B", "label")
LABEL_THRESHOLD = 128


@dataclass
class SamplePair:
    name: str
    a: np.ndarray        # (3, H, W) float32 in [0, 1]
    b: np.ndarray
    label: np.ndarray    # (H, W) uint8 in {0, 1}


@dataclass(frozen=True)
class DatasetLayout:
    root: Path

    def manifest(self, split: str) -> Path:
        return self.root / f"{split}.txt"

    def names(self, split: str) -> list[str]:
        path = self.manifest(split)
        if not path.is_file():
            raise IngestionError(f"missing split manifest {path}")
        return [ln.strip() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]

    def tile(self, sub: str, name: str) -> Path:
        return self.root / sub / f"{name}.png"


def _read_raster(path: Path, name: str) -> np.ndarray:
    if not path.is_file():
        raise IngestionError(f"tile {name!r}: missing file {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"tile {name!r}: unreadable raster {path}: {exc}") from exc


def _image(arr: np.ndarray, name: str, path: Path) -> np.ndarray:
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4) or arr.dtype != np.uint8:
        raise IngestionError(f"tile {name!r}: {path} is not an 8-bit RGB raster")
    return np.ascontiguousarray(arr[:, :, :3].transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0)


def read_pair(layout: DatasetLayout, name: str) -> SamplePair:
    pa, pb, pl = (layout.tile(s, name) for s in SUBDIRS)
    a = _image(_read_raster(pa, name), name, pa)
    b = _image(_read_raster(pb, name), name, pb)
    lab = _read_raster(pl, name)
    if lab.ndim == 3:
        lab = lab[:, :, 0]
    if a.shape != b.shape or lab.shape != a.shape[1:]:
        raise IngestionError(
            f"tile {name!r}: size mismatch A{a.shape[1:]} B{b.shape[1:]} label{lab.shape}")
    # 8-bit labels are thresholded; anything else must already be {0, 1}
    if lab.dtype == np.uint8:
        label = (lab >= LABEL_THRESHOLD).astype(np.uint8)
    elif np.all((lab == 0) | (lab == 1)):
        label = lab.astype(np.uint8)
    else:
        raise IngestionError(f"tile {name!r}: label {pl} is not binary")
    return SamplePair(name, a, b, label)


def load_dataset(root, split: str, rng: np.random.Generator | None = None) -> Iterator[SamplePair]:
    """Yield the pairs of ``split`` in manifest order, or in ``rng`` order when given."""
    layout = DatasetLayout(Path(root))
    names = layout.names(split)
    order = rng.permutation(len(names)) if rng is not None else range(len(names))
    shape = None
    for i in order:
        pair = read_pair(layout, names[i])
        if shape is None:
            shape = pair.label.shape
        elif pair.label.shape != shape:
            raise IngestionError(f"tile {pair.name!r}: size {pair.label.shape} differs from split size {shape}")
        yield pair


@dataclass
class SplitArrays:
    """A whole split held in memory: ``a``/``b`` (N, 3, H, W), ``label`` (N, H, W)."""
    names: list[str]
    a: np.ndarray
    b: np.ndarray
    label: np.ndarray

    def __len__(self):
        return len(self.names)


def load_split(root, split: str) -> SplitArrays:
    pairs = list(load_dataset(root, split))
    if not pairs:
        return SplitArrays([], np.zeros((0, 3, 0, 0), np.float32), np.zeros((0, 3, 0, 0), np.float32),
                           np.zeros((0, 0, 0), np.uint8))
    return SplitArrays([p.name for p in pairs], np.stack([p.a for p in pairs]),
                       np.stack([p.b for p in pairs]), np.stack([p.label for p in pairs]))


def check_disjoint(layout: DatasetLayout, splits: Sequence[str] = SPLITS) -> None:
    seen: dict[str, str] = {}
    for s in splits:
        if not layout.manifest(s).is_file():
            continue
        for n in layout.names(s):
            if n in seen and seen[n] != s:
                raise IngestionError(f"tile {n!r} listed in both {seen[n]} and {s}")
            seen[n] = s


# synthetic generator

NOISE = 0.008           # |A - B| outside changes stays below 0.008 + 1/255 after quantization
TEXTURE = 0.05
MIN_FG, MAX_FG = 0.02, 0.30


def _smooth_field(rng: np.random.Generator, tile: int, grid: int = 4) -> np.ndarray:
    """Bilinear upsampling of a coarse random grid: (3, tile, tile) in [0.25, 0.75]."""
    coarse = rng.uniform(0.25, 0.75, size=(3, grid, grid))
    pos = np.linspace(0, grid - 1, tile)
    i0 = np.minimum(np.floor(pos).astype(int), grid - 2)
    f = pos - i0
    rows = coarse[:, i0] * (1 - f)[None, :, None] + coarse[:, i0 + 1] * f[None, :, None]
    return rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]


def _rectangles(rng: np.random.Generator, tile: int) -> list[tuple[int, int, int, int]]:
    """Non-overlapping rectangles covering a foreground fraction in [MIN_FG, MAX_FG]."""
    lo, hi = max(4, tile // 10), max(6, tile // 3)
    while True:
        occupied = np.zeros((tile, tile), bool)
        rects = []
        for _ in range(int(rng.integers(1, 5))):
            for _attempt in range(20):
                h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
                y, x = int(rng.integers(0, tile - h + 1)), int(rng.integers(0, tile - w + 1))
                # one-pixel gap keeps neighbouring rectangles distinguishable
                if not occupied[max(0, y - 1):y + h + 1, max(0, x - 1):x + w + 1].any():
                    occupied[y:y + h, x:x + w] = True
                    rects.append((y, x, h, w))
                    break
        if MIN_FG <= occupied.mean() <= MAX_FG:
            return rects


def synth_pair(rng: np.random.Generator, tile: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One (A, B, label) triple as uint8 rasters ``(H, W, 3)``, ``(H, W, 3)``, ``(H, W)``.

    A changed rectangle is an object present in only one of the two images:
    a uniform intensity shift with a sharp outline whose interior pixels are
    only partly covered, so single-pixel differences under-report the region.
    """
    base = _smooth_field(rng, tile) + rng.uniform(-TEXTURE, TEXTURE, size=(3, tile, tile))
    a = base.copy()
    b = base + rng.uniform(-NOISE, NOISE, size=base.shape)
    label = np.zeros((tile, tile), np.uint8)
    for y, x, h, w in _rectangles(rng, tile):
        region = base[:, y:y + h, x:x + w]
        # shift away from the nearer bound so clipping cannot erase the change
        sign = np.where(region.mean(axis=(1, 2)) < 0.5, 1.0, -1.0)
        shift = sign * rng.uniform(0.15, 0.2) + rng.uniform(-0.03, 0.03, size=3) * sign
        cover = rng.random((h, w)) < rng.uniform(0.4, 0.7)
        cover[0, :] = cover[-1, :] = cover[:, 0] = cover[:, -1] = True
        target = b if rng.random() < 0.5 else a
        target[:, y:y + h, x:x + w] += shift[:, None, None] * cover
        label[y:y + h, x:x + w] = 1
    to8 = lambda v: np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return to8(a), to8(b), label


def synth_dataset(root, n_pairs: int | Sequence[int], tile: int = 64, seed: int = 0) -> DatasetLayout:
    """Write a synthetic dataset under ``root``.

    ``n_pairs`` is either a total (split 80/10/10) or explicit
    ``(train, val, test)`` counts.
    """
    if tile % 32:
        raise ConfigurationError(f"tile size {tile} must be divisible by 32")
    if isinstance(n_pairs, (int, np.integer)):
        n_val = n_test = int(n_pairs) // 10
        counts = (int(n_pairs) - n_val - n_test, n_val, n_test)
    else:
        counts = tuple(int(c) for c in n_pairs)
        if len(counts) != 3:
            raise ConfigurationError("split counts must be (train, val, test)")
    if min(counts) < 0:
        raise ConfigurationError("pair counts must be non-negative")
    layout = DatasetLayout(Path(root))
    for sub in SUBDIRS:
        (layout.root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    idx = 0
    for split, count in zip(SPLITS, counts):
        names = []
        for _ in range(count):
            name = f"{split}_{idx:05d}"
            idx += 1
            a, b, lab = synth_pair(rng, tile)
            Image.fromarray(a).save(layout.tile("A", name))
            Image.fromarray(b).save(layout.tile("B", name))
            Image.fromarray(lab * np.uint8(255)).save(layout.tile("label", name))
            names.append(name)
        layout.manifest(split).write_text("".join(n + "\n" for n in names))
    return layout
