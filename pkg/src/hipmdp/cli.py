"""Command-line entry point.

Subcommands: pretrain, run, demo-uncertainty, bench-scaling,
compare-models. Config resolution order: per-domain defaults, then the
JSON file given by --config, then --set overrides, then explicit flags.
Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .config import VARIANTS, load_config
from .errors import ConfigError, NumericalError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are configuration errors
        raise ConfigError(message)


def _add_common(sub):
    sub.add_argument("--domain", choices=("nav2d", "acrobot", "hiv"), default="nav2d")
    sub.add_argument("--config", help="JSON config file (dotted keys)")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--seed", default=None,
                     help="comma-separated seed list, e.g. 0,1,2,3,4")
    sub.add_argument("--episodes", type=int, default=None,
                     help="episodes per run (run/compare) or per instance (bench)")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     dest="overrides", help="dotted config override, repeatable")


def build_parser() -> _Parser:
    parser = _Parser(prog="hipmdp")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("pretrain", help="collect batch data and fit the models")
    _add_common(sub)
    sub.add_argument("--models", default=None,
                     help="comma list from embedded,linear,average")

    sub = subs.add_parser("run", help="variant x seed benchmark grid")
    _add_common(sub)
    sub.add_argument("--variant", default=None,
                     help=f"comma list from {','.join(VARIANTS)}")
    sub.add_argument("--pretrain-dir", default=None,
                     help="where pretrain checkpoints live (default: --out)")
    sub.add_argument("--workers", type=int, default=1)

    sub = subs.add_parser("demo-uncertainty",
                          help="predictive-std contrast across class regions")
    _add_common(sub)
    sub.add_argument("--pretrain-dir", default=None)

    sub = subs.add_parser("bench-scaling", help="per-episode wall-time flatness")
    _add_common(sub)

    sub = subs.add_parser("compare-models", help="held-out one-step MSE per model")
    _add_common(sub)
    sub.add_argument("--pretrain-dir", default=None)
    sub.add_argument("--workers", type=int, default=1)
    return parser


def _config_from_args(args) -> "ExperimentConfig":
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    cfg = load_config(args.domain, args.config, overrides)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        try:
            cfg.seeds = tuple(int(s) for s in args.seed.replace(",", " ").split())
        except ValueError as exc:
            raise ConfigError(f"bad --seed list {args.seed!r}") from exc
    if args.episodes is not None:
        cfg.run.n_episodes = args.episodes
    if getattr(args, "variant", None):
        variants = tuple(args.variant.replace(",", " ").split())
        for v in variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        cfg.variants = variants
    if getattr(args, "models", None):
        models = tuple(args.models.replace(",", " ").split())
        for m in models:
            if m not in ("embedded", "linear", "average"):
                raise ConfigError(f"cannot pretrain model {m!r}")
        cfg.pretrain.models = models
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config_from_args(args)
        if args.command == "pretrain":
            harness.cmd_pretrain(cfg)
        elif args.command == "run":
            harness.cmd_run(cfg, pretrain_from=args.pretrain_dir,
                            workers=args.workers)
        elif args.command == "demo-uncertainty":
            harness.cmd_demo_uncertainty(cfg, pretrain_from=args.pretrain_dir)
        elif args.command == "bench-scaling":
            episodes = args.episodes if args.episodes else harness.BENCH_EPISODES
            harness.cmd_bench_scaling(cfg, episodes=episodes)
        elif args.command == "compare-models":
            harness.cmd_compare_models(cfg, pretrain_from=args.pretrain_dir,
                                       workers=args.workers)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
