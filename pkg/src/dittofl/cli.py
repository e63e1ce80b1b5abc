"""Command line entry point.

    dittofl run CONFIG [--seed N] [--out PATH] [--trials N]
    dittofl sweep CONFIG --grid 0.1,1,10 [--seed N] [--out PATH] [--trials N]
    dittofl oracle K=50,n=10,sigma=1,tau=0.25[,K_a=10,tau_a=1,d=1,beta=...]

Exit codes: 0 success, 2 invalid config, 3 divergence, 4 output error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from .config import ConfigError, load_config
from .core import DivergenceError
from .experiment import emit_csv, emit_sweep_csv, run_experiment, sweep_lambda
from .oracle import (
    TheoryInputs,
    UseGlobal,
    lambda_star_adversarial,
    lambda_star_clean,
    posterior_variance,
    predicted_error_and_variance,
)

EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 2, 3, 4

log = logging.getLogger("dittofl")


def _parse_grid(text: str) -> list[float]:
    try:
        grid = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--grid: not a comma-separated list of numbers: {text!r}") from None
    if not grid:
        raise ConfigError("--grid is empty")
    if any(g < 0 for g in grid):
        raise ConfigError("--grid values must be >= 0")
    return grid


def _apply_overrides(cfg, args):
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be a 64-bit unsigned integer")
        cfg = replace(cfg, master_seed=args.seed)
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be >= 1")
        cfg = replace(cfg, trials=args.trials)
    if args.out is not None:
        cfg = replace(cfg, output=args.out)
    return cfg


_INT_KEYS = {"K", "n", "K_a", "d"}


def parse_theory_inputs(text: str) -> TheoryInputs:
    """``K=..,n=..`` pairs, or a path to a JSON object with the same keys."""
    if os.path.exists(text):
        try:
            with open(text) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read theory inputs: {exc}") from None
    else:
        raw = {}
        for part in text.split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise ConfigError(f"expected key=value, got {part!r}")
            key, value = (s.strip() for s in part.split("=", 1))
            try:
                raw[key] = int(value) if key in _INT_KEYS else float(value)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {value!r}") from None
    try:
        return TheoryInputs(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _num(x):
    return None if x is UseGlobal else float(x)


def cmd_oracle(args) -> int:
    inputs = parse_theory_inputs(args.inputs)
    err, var = predicted_error_and_variance(inputs)
    out = {
        "lambda_star_clean": _num(lambda_star_clean(inputs)),
        "lambda_star_adversarial": _num(lambda_star_adversarial(inputs)),
        "posterior_variance": posterior_variance(inputs),
        "predicted_error": err,
        "predicted_error_variance": var,
    }
    # null lambda means: use the global model (infinite lambda)
    print(json.dumps(out, indent=2))
    return 0


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    rows = run_experiment(cfg)
    emit_csv(rows, cfg.output)
    log.info("wrote %d rows to %s", len(rows), cfg.output)
    return 0


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    grid = _parse_grid(args.grid)
    rows = sweep_lambda(cfg, grid)
    emit_sweep_csv(rows, cfg.output)
    log.info("wrote %d summary rows to %s", len(rows), cfg.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dittofl", description="Personalized federated learning experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp):
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--out", help="output CSV path override")
        sp.add_argument("--trials", type=int, help="Monte Carlo trial count override")

    run = sub.add_parser("run", help="run a config and write per-trial results")
    run.add_argument("config")
    overrides(run)
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="per-lambda Monte Carlo summary, clean and attacked")
    sw.add_argument("config")
    sw.add_argument("--grid", required=True, help="comma-separated lambda values")
    overrides(sw)
    sw.set_defaults(func=cmd_sweep)

    orc = sub.add_parser("oracle", help="closed-form optimal lambda and predicted error")
    orc.add_argument("inputs", help="K=..,n=..,sigma=..,tau=.. or a JSON file")
    orc.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # remaining validation failures surface at run time (for example Krum with too few updates)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
