"""LR/HR latent convergence on toy pairs: writes the curve CSV, a plot and the tolerance sweep."""

import argparse
from pathlib import Path

import numpy as np

from partdiff.analysis import ConvergenceError, convergence_curve, plot_curve, suggest_cutoff, write_curve_csv
from partdiff.data import toy_dataset
from partdiff.schedule import parse_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=200)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--schedule", default="linear(5e-05,0.01,2000)")
    ap.add_argument("--stride", type=int, default=10)
    ap.add_argument("--out", default="runs/convergence")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sched = parse_schedule(args.schedule)
    pairs = [(p.lr_up, p.hr) for p in toy_dataset(args.pairs, args.size, 2, seed=0)]
    curve = convergence_curve(pairs, sched, args.stride, np.random.default_rng(0))
    write_curve_csv(curve, out / "curve.csv")

    print(f"gap at t=0: {curve.gap[0]:.3f} dB, at t=T: {curve.gap[-1]:.4f} dB")
    best = None
    for tol in (0.5, 0.1, 0.05, 0.02, 0.01):
        try:
            k = suggest_cutoff(curve, tol)
        except ConvergenceError:
            print(f"tol {tol:5.2f} dB: no convergence")
            continue
        best = k if tol == 0.02 else best
        print(f"tol {tol:5.2f} dB: K={k:5d}  K/T={k / sched.T:.3f}  sqrt_alpha_bar={sched.sqrt_alpha_bar(k):.4f}")
    plot_curve(curve, out / "curve.png", best)


if __name__ == "__main__":
    main()
