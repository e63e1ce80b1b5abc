"""Benign error versus lambda on point estimation, clean and with adversaries.

Writes a sweep CSV (variant, lambda, mean_error, mean_std, ...) and prints
the optimal lambda from the closed form for comparison.

    python scripts/lambda_sweep.py --trials 500 --out sweep.csv
"""

import argparse
from dataclasses import replace

import numpy as np

from dittofl.config import load_config
from dittofl.experiment import emit_sweep_csv, sweep_lambda
from dittofl.oracle import TheoryInputs, lambda_star_adversarial, lambda_star_clean


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/pe_adversarial.json")
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--out", default="sweep.csv")
    args = p.parse_args()

    cfg = load_config(args.config)
    cfg = replace(cfg, trials=args.trials)
    data = cfg.data
    inp = TheoryInputs(K=data.K, n=data.n, sigma=data.sigma, tau=data.tau, K_a=data.K_a, tau_a=data.tau_a)
    grid = np.logspace(-2, 2, args.points) * lambda_star_clean(inp)
    rows = sweep_lambda(cfg, grid)
    emit_sweep_csv(rows, args.out)
    print(f"lambda* clean = {lambda_star_clean(inp):.4g}, adversarial = {lambda_star_adversarial(inp):.4g}")
    for variant in ("clean", "attacked"):
        sel = [r for r in rows if r.variant == variant]
        if sel:
            best = min(sel, key=lambda r: r.mean_error)
            print(f"{variant}: best grid lambda {best.lam:.4g} (mean error {best.mean_error:.4g})")
    print(f"wrote {len(rows)} rows to {args.out}")


if __name__ == "__main__":
    main()
