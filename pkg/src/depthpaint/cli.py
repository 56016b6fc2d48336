"""Command-line interface.

Subcommands: synth, train, infer, eval, montage.
Exit codes: 0 ok, 2 bad input, 3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .harness import (
    NumericError,
    TrainConfig,
    evaluate,
    infer,
    montage,
    parse_override,
    train,
)
from .ingestion import load_sample, save_sample, synth_scene


def _load_samples_arg(path: Path):
    """Accept either a single sample directory or a directory of them."""
    if (path / "rgb.png").exists():
        return [load_sample(path)]
    dirs = sorted(p for p in path.iterdir() if (p / "rgb.png").exists())
    if not dirs:
        raise FileNotFoundError(f"no samples found under {path}")
    return [load_sample(p) for p in dirs]


def _save_png(img, path: Path) -> None:
    arr = np.round(img.clamp(0, 1).numpy() * 255.0).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(path)
    else:
        Image.fromarray(arr, mode="L").save(path)


def cmd_synth(args) -> int:
    out = Path(args.out)
    for i in range(args.count):
        sample = synth_scene(args.seed + i, args.sparsity,
                             (args.height, 2 * args.height))
        save_sample(sample, out / f"sample_{i:04d}")
    print(f"wrote {args.count} samples to {out}")
    return 0


def cmd_train(args, extra: list[str]) -> int:
    overrides = dict(parse_override(tok) for tok in extra)
    if args.config:
        cfg = TrainConfig.from_file(args.config, overrides)
    else:
        cfg = TrainConfig(**overrides)
    paths = train(cfg)
    print(f"final checkpoint: {paths[-1]}")
    return 0


def cmd_infer(args) -> int:
    samples = _load_samples_arg(Path(args.input))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        pred, edges = infer(args.checkpoint, sample)
        _save_png(pred, out / f"pred_{i:04d}.png")
        _save_png(edges.edges, out / f"edges_{i:04d}.png")
    print(f"wrote {len(samples)} predictions to {out}")
    return 0


def cmd_eval(args) -> int:
    samples = _load_samples_arg(Path(args.data))
    report = evaluate(args.checkpoint, samples, report_path=args.report)
    print(f"aggregate: {report.aggregate}")
    print(f"report written to {args.report}")
    return 0


def cmd_montage(args) -> int:
    samples = _load_samples_arg(Path(args.inputs))
    montage(args.checkpoint, samples, args.out, max_rows=args.max_rows)
    print(f"montage written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthpaint",
                                     description="depth-guided street-scene outpainting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic sample directories")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sparsity", type=float, default=0.07)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", default="", help="TOML config file")

    p = sub.add_parser("infer", help="predict outpaintings for saved samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="sample dir or dir of sample dirs")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="compute PSNR / edge-F1 metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="JSON report path (CSV written alongside)")

    p = sub.add_parser("montage", help="grid of input/pred/GT/edge panels")
    p.add_argument("--inputs", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-rows", type=int, default=4)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "synth":
            _reject_extra(extra)
            return cmd_synth(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "infer":
            _reject_extra(extra)
            return cmd_infer(args)
        if args.command == "eval":
            _reject_extra(extra)
            return cmd_eval(args)
        if args.command == "montage":
            _reject_extra(extra)
            return cmd_montage(args)
        parser.error(f"unknown command {args.command}")
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _reject_extra(extra: list[str]) -> None:
    if extra:
        raise ValueError(f"unrecognized arguments: {extra}")


if __name__ == "__main__":
    sys.exit(main())
