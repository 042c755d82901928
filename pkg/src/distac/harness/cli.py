"""Command-line entry point: ``distac {toy,train,eval,flops,export}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..agent import VARIANTS
from ..metrics import NumericAccuracyError
from .config import ConfigError, build_config
from .persist import IntegrityError
from .runs import TOY_METHODS, TOY_STEPS, run_eval, run_export, run_flops, run_toy, run_train

FLOPS_NOTE = ("note: counts come from a small MLP on a 5x5 gridworld; only the ordering of "
              "variants is meaningful, not the absolute values")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distac", description="Distributional actor-critic toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("toy", help="tabular lab: fitting experiment and contraction checks")
    t.add_argument("--mdp", default="five_state", help="'five_state' or a path to an MDP text file")
    t.add_argument("--loss", default="all", choices=["all", *TOY_METHODS])
    t.add_argument("--steps", type=int, default=TOY_STEPS)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--gamma", type=float, default=None)
    t.add_argument("--contraction-trials", type=int, default=0)
    t.add_argument("--out", type=Path, default=Path("toy-out"))

    tr = sub.add_parser("train", help="train an agent; writes a run directory")
    tr.add_argument("--config", type=Path, default=None)
    tr.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    tr.add_argument("--variant", choices=VARIANTS)
    tr.add_argument("--env")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--iterations", type=int)
    tr.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("eval", help="re-evaluate a run from its manifest")
    e.add_argument("--run", type=Path, required=True)
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--checkpoint", default=None)

    f = sub.add_parser("flops", help="per-variant FLOP table")
    f.add_argument("--variants", default="all", help="'all' or comma-separated variant names")
    f.add_argument("--out", type=Path, default=None)

    x = sub.add_parser("export", help="convert run metrics to CSV plot data")
    x.add_argument("--run", type=Path, action="append", required=True)
    x.add_argument("--out", type=Path, required=True)
    return p


def _train(args) -> int:
    overrides = list(args.set)
    for key in ("variant", "env", "seed", "iterations"):
        val = getattr(args, key)
        if val is not None:
            overrides.append(f"{key}={val}")
    cfg = build_config(args.config, overrides)

    def progress(rec):
        logging.getLogger("distac.train").info(
            "iter %d frames %d return %s", rec["iteration"], rec["frames"], rec["mean_return"])

    manifest = run_train(cfg, args.out, progress)
    print(json.dumps({"run": str(args.out), "final_eval_mean": manifest["final_eval"]["mean"]}))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "toy":
            losses = None if args.loss == "all" else [args.loss]
            summary = run_toy(args.out, args.mdp, losses, args.steps, args.seed, args.gamma,
                              args.contraction_trials)
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "train":
            return _train(args)
        elif args.command == "eval":
            block = run_eval(args.run, args.episodes, args.checkpoint)
            print(json.dumps(block, indent=2))
        elif args.command == "flops":
            variants = VARIANTS if args.variants == "all" else tuple(v.strip() for v in args.variants.split(","))
            bad = [v for v in variants if v not in VARIANTS]
            if bad:
                raise ConfigError(f"unknown variants: {', '.join(bad)}")
            res = run_flops(args.out, variants)
            print(f"{'variant':<12}{'inference':>14}{'update':>16}")
            for r in res["rows"]:
                print(f"{r['variant']:<12}{r['inference_flops']:>14,}{r['update_flops']:>16,}")
            if "gmac_vs_scalar_plus_overhead" in res:
                print(f"gmac / (ppo_scalar + GMM-head overhead) = {res['gmac_vs_scalar_plus_overhead']:.4f}")
            print(FLOPS_NOTE)
        elif args.command == "export":
            for path in run_export(args.run, args.out):
                print(path)
    except (ConfigError, IntegrityError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericAccuracyError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
