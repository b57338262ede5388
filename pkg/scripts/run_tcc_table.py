"""Two-circles robustness table: every strategy for a few seeds.

    python scripts/run_tcc_table.py --seeds 0 1 2 --out runs/tcc_table.csv

Writes one row per (seed, strategy) with the epochs actually run and the
min/mean/max distance from the training points to the decision boundary.
"""

import argparse
import csv
import sys
import time
from pathlib import Path

from blindat.tcc import TCC_STRATEGIES, TccConfig, run_tcc_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--strategies", nargs="+", default=list(TCC_STRATEGIES), choices=TCC_STRATEGIES)
    ap.add_argument("--epochs", type=int, default=8000, help="budget for BAT (and cap for the others)")
    ap.add_argument("--out", default="runs/tcc_table.csv")
    args = ap.parse_args()

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "strategy", "epochs", "min", "mean", "max", "seconds"])
        for seed in args.seeds:
            for strategy in args.strategies:
                t = time.time()
                res = run_tcc_experiment(TccConfig(strategy=strategy, seed=seed, epochs=args.epochs))
                r = res.robustness
                secs = time.time() - t
                w.writerow([seed, strategy, res.train.epochs, f"{r.min:.6f}", f"{r.mean:.6f}", f"{r.max:.6f}", f"{secs:.1f}"])
                fh.flush()
                print(f"seed {seed} {strategy:6s} min {r.min:.4f} after {res.train.epochs} epochs ({secs:.0f}s)", file=sys.stderr)


if __name__ == "__main__":
    main()
