"""Command-line interface.

Subcommands: gen, train, eval, ablate, heatmap, summary, path-debug.
Every flag mirrors a RunConfig key; `--config FILE` loads a config file
and explicit flags override it.  Exit code 0 on success; on failure a
single `error: ...` line goes to stderr and the exit code is 1.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import data as D
from . import scan as S
from . import train as TR
from .config import build_config
from .networks import summarize


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (key = value lines)")
    for key in ("task", "data-dir", "out-dir", "seed", "rates", "window-mode", "state-dim",
                "widths", "depths", "decoder-width", "scan-strategy", "merge-mode", "zoh-mode",
                "num-classes", "steps", "batch-size", "lr", "weight-decay",
                "lambda-cd", "lambda-sc", "lambda-ss",
                "aug-rotate90", "aug-flip-lr", "aug-flip-tb",
                "image-size", "train-count", "val-count", "test-count", "noise",
                "sek-eta", "cos-mode"):
        p.add_argument(f"--{key}")


def _config_from(args) -> "RunConfig":
    overrides = {}
    for key, value in vars(args).items():
        snake = key.replace("-", "_")
        if snake in ("config", "command", "split", "index", "stage", "out", "checkpoint",
                     "height", "width", "rate", "mode", "kind"):
            continue
        if value is not None:
            overrides[snake] = value
    return build_config(args.config, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="awmamba",
                                     description="atrous-window state space change detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: out_dir/checkpoint.awmb)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])

    p = sub.add_parser("ablate", help="twin atrous-vs-csm runs on shared data")
    _add_config_flags(p)

    p = sub.add_parser("heatmap", help="export a decoder-stage activation heatmap")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--stage", type=int, required=True, help="decoder stage 1..4")
    p.add_argument("--out", help="output PGM path")

    p = sub.add_parser("summary", help="print model parameter counts and stage shapes")
    _add_config_flags(p)

    p = sub.add_parser("path-debug", help="print a scan path as a grid of positions")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--kind", required=True,
                   choices=["raster", "csm_h_fwd", "csm_v_fwd", "csm_h_rev", "csm_v_rev", "atrous"])
    p.add_argument("--rate", type=int, default=1)
    p.add_argument("--mode", default="contiguous", choices=["contiguous", "dilated"])

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as exc:  # single machine-parsable error line
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "path-debug":
        if args.kind == "raster":
            path = S.raster_path(args.height, args.width)
        elif args.kind == "atrous":
            path = S.atrous_window_path(args.height, args.width, args.rate, args.mode)
        else:
            idx = S.CSM_MODES.index(args.kind)
            path = S.cross_scan_paths(args.height, args.width)[idx]
        print(S.format_path_grid(path))
        return 0

    cfg = _config_from(args)
    if cmd == "gen":
        manifest = D.gen_synthetic(TR.synthetic_spec(cfg), cfg.data_dir)
        print(f"wrote {manifest}")
        return 0
    if cmd == "train":
        ckpt = TR.train(cfg)
        print(f"wrote {ckpt}")
        return 0
    if cmd == "eval":
        ckpt = args.checkpoint or os.path.join(cfg.out_dir, "checkpoint.awmb")
        TR.evaluate(cfg, ckpt, split=args.split,
                    run_id=os.path.basename(cfg.out_dir.rstrip("/")) or "run")
        print(f"wrote {os.path.join(cfg.out_dir, 'metrics.csv')}")
        return 0
    if cmd == "ablate":
        report = TR.ablate(cfg)
        print(f"wrote {report}")
        return 0
    if cmd == "heatmap":
        ckpt = args.checkpoint or os.path.join(cfg.out_dir, "checkpoint.awmb")
        out = args.out or os.path.join(cfg.out_dir, f"heatmap_stage{args.stage}.pgm")
        os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
        TR.export_heatmap(cfg, ckpt, args.split, args.index, args.stage, out)
        print(f"wrote {out}")
        return 0
    if cmd == "summary":
        model = TR.build_model(cfg)
        print(summarize(model, cfg.image_size, cfg.image_size))
        return 0
    raise ValueError(f"unknown command {cmd!r}")


if __name__ == "__main__":
    sys.exit(main())
