"""Cutoff step selected by a noise-scale threshold over a grid of linear schedules."""

import argparse

from partdiff.analysis import schedule_grid
from partdiff.schedule import build_linear_schedule, cutoff_step_for_threshold


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--threshold", type=float, default=0.25)
    ap.add_argument("--steps", type=int, default=100)
    args = ap.parse_args()

    sched = build_linear_schedule(1e-5, 0.213, args.steps)
    k = cutoff_step_for_threshold(sched, args.threshold)
    print(f"linear(1e-05,0.213,{args.steps}): K={k}, sqrt_alpha_bar[K]={sched.sqrt_alpha_bar(k):.8f}")

    grid = schedule_grid([1e-5, 1e-4, 1e-3], [0.1, 0.213, 0.3], args.steps, at_step=args.steps // 2)
    print(f"sqrt_alpha_bar at t={args.steps // 2}:")
    for b1, bt, val in grid:
        print(f"  linear({b1:g},{bt:g},{args.steps}): {val:.6f}")


if __name__ == "__main__":
    main()
