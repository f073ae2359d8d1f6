"""Command-line entry point: ``defix <command> [--config C] [--seed S] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .store import ArtifactStore, MissingArtifactError

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_PRECONDITION = 4


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands accept the same flags; SUPPRESS keeps them from resetting values given before the command
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=d(None), help="YAML run configuration (defaults if omitted)")
    g.add_argument("--seed", type=int, default=d(0), help="root seed (u64)")
    g.add_argument("--out", default=d("runs/default"), help="artifact store directory")
    g.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(True)
    p = argparse.ArgumentParser(prog="defix", description=__doc__, parents=[_global_flags(False)])
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in [("collect", "roll the autopilot and store the D0 dataset"),
                       ("train-il", "behavior-clone the brake policy on D0"),
                       ("dagger", "run the DAgger iterations"),
                       ("stage1", "collect + train-il + dagger"),
                       ("stage2-iter", "one detect-and-fix iteration"),
                       ("report", "summary table and figures from stored evaluations")]:
        sub.add_parser(name, help=text, parents=[common])
    ev = sub.add_parser("evaluate", help="evaluate a mode on the mixed suite", parents=[common])
    ev.add_argument("--mode", required=True, choices=("autopilot", "il_only", "rl_only", "defix"))
    rp = sub.add_parser("replay", help="replay a stored scenario and write its trace", parents=[common])
    rp.add_argument("--scenario", required=True, help="mini-scenario id, mini_<k> name, or route case id")
    rp.add_argument("--mode", default="defix", choices=("autopilot", "il_only", "rl_only", "defix"))
    return p


def run(args) -> dict | str:
    from . import pipeline, report

    cfg = load_config(args.config)
    if args.seed < 0 or args.seed >= 2**64:
        raise ConfigError({"--seed": "must be an unsigned 64-bit integer"})
    seed = args.seed % 2**63
    store = ArtifactStore(args.out)
    store.log_command({"command": args.command, "seed": args.seed, "config_hash": cfg.hash(),
                       **({"mode": args.mode} if hasattr(args, "mode") else {})})
    cmd = args.command
    if cmd == "collect":
        return pipeline.cmd_collect(store, cfg, seed)
    if cmd == "train-il":
        return pipeline.cmd_train_il(store, cfg, seed)
    if cmd == "dagger":
        return pipeline.cmd_dagger(store, cfg, seed)
    if cmd == "stage1":
        return pipeline.cmd_stage1(store, cfg, seed)
    if cmd == "stage2-iter":
        return pipeline.cmd_stage2_iteration(store, cfg, seed)
    if cmd == "evaluate":
        return pipeline.cmd_evaluate(store, cfg, seed, args.mode)["summary"]
    if cmd == "report":
        return report.cmd_report(store)
    if cmd == "replay":
        return str(pipeline.cmd_replay(store, cfg, seed, args.scenario, args.mode))
    raise ValueError(f"unknown command {cmd}")


def main(argv=None) -> int:
    from .pipeline import PreconditionError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = run(args)
    except ConfigError as exc:
        for field, msg in exc.errors.items():
            print(f"config error: {field}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except FileNotFoundError as exc:
        print(f"file not found: {exc}", file=sys.stderr)
        return EXIT_MISSING
    if isinstance(out, str):
        print(out)
    else:
        print(json.dumps(out, indent=1, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
