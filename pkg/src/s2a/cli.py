"""``s2a`` command-line entry point.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline as P
from .config import ConfigError, PipelineConfig, load_config
from .detector import NumericalError

COMMANDS = ("decouple", "bandselect", "pca", "split", "generate", "train", "detect", "eval", "gradcheck")


def build_parser():
    parser = argparse.ArgumentParser(prog="s2a", description="Hyperspectral two-stream detection pipeline.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--k", type=int, help="number of bands/components for bandselect and pca")
    parser.add_argument("-q", "--quiet", action="store_true")
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.quiet:
        logging.getLogger().setLevel(logging.ERROR)
    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg = cfg.with_overrides(seed=args.seed, output_dir=args.out)
    cmd = args.command
    if cmd == "generate":
        ids = P.cmd_generate(cfg)
        print(f"generated {len(ids)} scenes under {cfg.out()}")
    elif cmd == "decouple":
        ids = P.cmd_decouple(cfg)
        print(f"decoupled {len(ids)} cubes")
    elif cmd == "bandselect":
        ids = P.cmd_bandselect(cfg, args.k)
        print(f"band selection written for {len(ids)} cubes")
    elif cmd == "pca":
        ids = P.cmd_pca(cfg, args.k)
        print(f"pca written for {len(ids)} cubes")
    elif cmd == "split":
        parts = P.cmd_split(cfg)
        print("split sizes train/val/test = " + "/".join(str(len(p)) for p in parts))
    elif cmd == "train":
        path = P.cmd_train(cfg)
        print(f"final checkpoint {path}")
    elif cmd == "detect":
        ids = P.cmd_detect(cfg)
        print(f"detections written for {len(ids)} images")
    elif cmd == "eval":
        result = P.cmd_eval(cfg)
        print(f"map50 = {result.map50:.6f}\nmap5095 = {result.map5095:.6f}")
    elif cmd == "gradcheck":
        results = P.cmd_gradcheck(cfg)
        bad = [r for r in results if not r.passed]
        worst = max((r.max_rel_error for r in results), default=0.0)
        print(f"gradcheck: {len(results) - len(bad)}/{len(results)} passed, max relative error {worst:.3e}")
        if bad:
            for r in bad:
                print(f"FAIL {r.module}.{r.name} seed={r.seed} max_rel_error={r.max_rel_error:.3e}", file=sys.stderr)
            return 2
    return 0


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return run(argv)
    except (ConfigError, P.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
