"""Plot a sweep CSV: benign mean error and std versus lambda (needs matplotlib).

    python scripts/plot_sweep.py sweep.csv --out sweep.png
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from dittofl.experiment import read_csv_rows


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("csv")
    p.add_argument("--out", default="sweep.png")
    args = p.parse_args()

    rows = read_csv_rows(args.csv)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharex=True)
    for variant in sorted({r["variant"] for r in rows}):
        sel = sorted((r for r in rows if r["variant"] == variant), key=lambda r: float(r["lambda"]))
        lam = [float(r["lambda"]) for r in sel]
        axes[0].plot(lam, [float(r["mean_error"]) for r in sel], marker="o", label=variant)
        axes[1].plot(lam, [float(r["mean_std"]) for r in sel], marker="o", label=variant)
    for ax, title in zip(axes, ("benign mean error", "benign std")):
        ax.set_xscale("log")
        ax.set_xlabel("lambda")
        ax.set_title(title)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"saved {args.out}")


if __name__ == "__main__":
    main()
