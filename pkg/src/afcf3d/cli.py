"""Command-line entry point: synth, train, eval, infer, complexity.

Exit codes: 0 success, 2 configuration error, 3 ingestion error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .config import ModelConfig, TrainConfig, load_kv
from .data import synth_dataset
from .errors import AFCFError, ConfigurationError, IngestionError
from .model import build_model, count_complexity
from .pipeline import evaluate, infer_render, train
from .tensorio import write_t5d

THREADS_ENV = "AFCF3D_THREADS"
log = logging.getLogger("afcf3d")


def _thread_count(args) -> int | None:
    """``--deterministic`` pins one thread; otherwise ``--threads`` then the env var."""
    if getattr(args, "deterministic", False):
        return 1
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"{THREADS_ENV}={env!r} is not an integer") from None
    return None


def _split_counts(text: str):
    parts = [p for p in text.replace(",", " ").split() if p]
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise ConfigurationError(f"--pairs expects N or TRAIN,VAL,TEST, got {text!r}") from None
    if len(nums) == 1:
        return nums[0]
    if len(nums) == 3:
        return tuple(nums)
    raise ConfigurationError(f"--pairs expects N or TRAIN,VAL,TEST, got {text!r}")


def cmd_synth(args) -> int:
    layout = synth_dataset(args.out, _split_counts(args.pairs), args.tile, args.seed)
    print(f"wrote synthetic dataset to {layout.root}")
    return 0


def cmd_train(args) -> int:
    cfg = load_kv(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mode is not None:
        cfg.mode = args.mode
    if args.epochs is not None:
        cfg.epochs = args.epochs
    cfg.deterministic = bool(args.deterministic)
    result = train(cfg, args.data, out_dir=args.out,
                   progress=lambda r: log.info("epoch %d loss %.5f val_f1 %.4f val_iou %.4f (%.1fs)",
                                               r.epoch, r.train_loss, r.val_f1, r.val_iou, r.wall_time))
    print(f"best epoch {result.best_epoch} val_f1 {max(result.best_val_f1, 0.0):.4f}; outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate(args.checkpoint, args.data, args.split)
    text = report.to_json() if args.report and args.report.endswith(".json") else report.to_text()
    if args.report:
        Path(args.report).write_text(text if text.endswith("\n") else text + "\n")
    print(report.to_text(), end="")
    return 0


def _read_image(path: str) -> np.ndarray:
    p = Path(path)
    try:
        with Image.open(p) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read raster {p}: {exc}") from exc
    return arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)


def cmd_infer(args) -> int:
    a, b = _read_image(args.a), _read_image(args.b)
    if a.shape != b.shape:
        raise IngestionError(f"size mismatch: {args.a} {a.shape[1:]} vs {args.b} {b.shape[1:]}")
    label = None
    if args.label:
        try:
            with Image.open(args.label) as im:
                lab = np.asarray(im.convert("L"))
        except (OSError, ValueError) as exc:
            raise IngestionError(f"cannot read raster {args.label}: {exc}") from exc
        if lab.shape != a.shape[1:]:
            raise IngestionError(f"label {args.label} size {lab.shape} does not match {a.shape[1:]}")
        label = lab >= 128
    render, prob = infer_render(args.checkpoint, a, b, label)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render).save(out / "render.png")
    Image.fromarray(np.clip(np.rint(prob * 255.0), 0, 255).astype(np.uint8)).save(out / "prob.png")
    write_t5d(out / "prob.t5d", prob)
    print(f"wrote render.png, prob.png and prob.t5d to {out}")
    return 0


def cmd_complexity(args) -> int:
    model = build_model(ModelConfig(mode=args.mode))
    params, flops = count_complexity(model, args.input_size)
    print(f"params {params / 1e6:.2f} M")
    print(f"flops {flops / 1e9:.2f} G")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="afcf3d", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic change-detection dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", default="100", help="total N (80/10/10 split) or TRAIN,VAL,TEST")
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and keep the best-validation checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="flat key=value training config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible run")
    p.add_argument("--mode", choices=("3d", "2d"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="global-count metrics on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--report", help="write the report here (.json for JSON, else key=value)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="probability map and change render for one pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--label")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("complexity", help="parameter count and FLOPs")
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--mode", choices=("3d", "2d"), default="3d")
    p.set_defaults(func=cmd_complexity)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        threads = _thread_count(args)
        limit = threadpool_limits(threads) if threads else contextlib.nullcontext()
        with limit:
            return args.func(args)
    except AFCFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigurationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
