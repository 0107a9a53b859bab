"""Command-line entry point: ``scorelab run|verify|schedule|bounds``."""
from __future__ import annotations

import argparse
import os
import sys
from typing import Optional, Sequence

from .config import ConfigError, load, loads, parse_config
from .sde_models import DomainError
from .experiments import (EXIT_BOUND, EXIT_CONFIG, EXIT_OK, evaluate_bounds, format_schedule,
                          run_experiment, split_params, theory_params)

THREADS_ENV = "SSL_THREADS"


def _threads(requested: int) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            requested = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}: expected an integer, got {env!r}") from None
    if requested < 1:
        raise ConfigError(f"threads: must be at least 1, got {requested}")
    return requested


def _set_value(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    for conv in (int, float):
        try:
            return key.strip(), conv(raw)
        except ValueError:
            pass
    return key.strip(), raw.strip()


class _Parser(argparse.ArgumentParser):
    # usage errors share the config-error exit code; 2 is reserved for violated bounds
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="scorelab", description="Score-based sampler experiments and bounds.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment described by a TOML file")
    run.add_argument("config")
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--output", default=None, help="output directory (default: output_dir from the config)")
    run.add_argument("--quiet", action="store_true", help="do not print the summary")

    ver = sub.add_parser("verify", help="run an acceptance suite")
    ver.add_argument("suite", help="closed_forms, soundness, simulation or all")

    sch = sub.add_parser("schedule", help="print the annealing noise ladder")
    sch.add_argument("--d", type=int, default=1)
    sch.add_argument("--sigma-min", type=float, default=1.0)
    sch.add_argument("--c-ls", type=float, default=1.0)
    sch.add_argument("--m1", type=float, default=0.0)
    sch.add_argument("--eps-tv", type=float, default=0.1)
    sch.add_argument("--c", type=float, default=1.0)
    sch.add_argument("--L", type=float, default=1.0)

    bnd = sub.add_parser("bounds", help="evaluate a closed-form bound")
    bnd.add_argument("file", nargs="?", help="TOML config whose [bounds] table is used")
    bnd.add_argument("--theorem", default=None)
    bnd.add_argument("--chi0", type=float, default=None)
    bnd.add_argument("--set", dest="sets", action="append", type=_set_value, default=[],
                     metavar="KEY=VALUE", help="override a parameter (repeatable)")
    return ap


def _cmd_run(args) -> int:
    cfg = load(args.config)
    result = run_experiment(cfg, _threads(args.threads), args.output)
    if not args.quiet:
        print(result.summary)
    return result.status


def _cmd_verify(args) -> int:
    from .acceptance import run_suite

    try:
        results = run_suite(args.suite)
    except KeyError:
        raise ConfigError(f"verify: unknown suite {args.suite!r}") from None
    return EXIT_OK if all(r.passed for r in results) else EXIT_BOUND


def _cmd_schedule(args) -> int:
    cfg = parse_config({"kind": "schedule", "schedule": {
        "d": args.d, "sigma_min": args.sigma_min, "C_LS": args.c_ls, "M1": args.m1,
        "eps_tv": args.eps_tv, "c": args.c, "L": args.L}})
    from .bounds import noise_schedule

    s = cfg.schedule
    print(format_schedule(noise_schedule(s.d, s.sigma_min, s.C_LS, s.M1, s.eps_tv, s.c, s.L), s.d))
    return EXIT_OK


def _cmd_bounds(args) -> int:
    cfg = load(args.file) if args.file else loads('kind = "bounds"')
    b = cfg.bounds
    values = dict(b.params)
    values.update(dict(args.sets))
    theorem = args.theorem or b.theorem
    chi0 = b.chi0 if args.chi0 is None else args.chi0
    # re-validate the merged table so bad theorem names and values report a location
    merged = parse_config({"kind": "bounds", "bounds": {"theorem": theorem, "chi0": chi0, "params": values,
                                                         "D": b.D, "delta": b.delta}}).bounds
    theory, extra = split_params(merged.params)
    try:
        text, _ = evaluate_bounds(merged.theorem, theory_params(theory), merged.chi0, merged.D,
                                  merged.delta, extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bounds.params: {exc}") from None
    print(text)
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "verify": _cmd_verify, "schedule": _cmd_schedule, "bounds": _cmd_bounds}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
