"""Command-line entry point: ``gfnoma <subcommand> [--config FILE] [...]``.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .cnn import TrainingDivergedError
from .config import ConfigError, dump_config, load_config
from . import experiments as ex

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _common(p: argparse.ArgumentParser, workers=False, detectors=False, checkpoint=False):
    p.add_argument("--config", type=Path, help="YAML experiment config (defaults: desk scale)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    if workers:
        p.add_argument("--workers", type=int, default=1, help="parallel sweep points")
    if detectors:
        p.add_argument("--detectors", type=lambda s: tuple(x for x in s.split(",") if x),
                       help="comma-separated subset of " + ",".join(ex.DETECTORS))
    if checkpoint:
        p.add_argument("--checkpoint", type=Path, help="CNN checkpoint (default OUT/cnn.ckpt)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfnoma", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("gen-data", help="simulate and store train/val/test frames"))
    p = sub.add_parser("train", help="train CNN-AD on stored frames")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from OUT/train_state.gfn")
    for name, text in (("sweep-snr", "detectors versus SNR"),
                       ("sweep-activity", "detectors versus true activity rate")):
        _common(sub.add_parser(name, help=text), workers=True, detectors=True, checkpoint=True)
    _common(sub.add_parser("threshold-analysis", help="analytic vs empirical threshold error"),
            workers=True)
    _common(sub.add_parser("table-metrics", help="per-device precision/recall/F1"),
            workers=True, detectors=True, checkpoint=True)
    return parser


def _resolve(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    return cfg.replace(**changes) if changes else cfg


def run(args) -> Path:
    cfg = _resolve(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / f"config-{args.command}.yaml")
    cmd = args.command
    if cmd == "gen-data":
        ex.gen_data(cfg, out, log=lambda m: print(m, file=sys.stderr))
        return out / "data"
    if cmd == "train":
        return ex.train_cnn(cfg, out, resume=args.resume)
    if cmd == "sweep-snr":
        return ex.sweep_snr(cfg, out, args.checkpoint, args.workers, args.detectors)
    if cmd == "sweep-activity":
        return ex.sweep_activity(cfg, out, args.checkpoint, args.workers, args.detectors)
    if cmd == "threshold-analysis":
        ex.threshold_analysis(cfg, out)
        return out / "threshold_summary.csv"
    if cmd == "table-metrics":
        return ex.table_metrics(cfg, out, args.checkpoint, args.detectors)
    raise AssertionError(cmd)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        path = run(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
