"""Write every two-point sweep (figures 7 to 10) as CSV.

    python scripts/make_theory_figures.py --out runs/theory
"""

import argparse
from pathlib import Path

from blindat import theory


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/theory")
    ap.add_argument("--lam", type=float, default=1e-5)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fig, header in theory.FIGURES.items():
        rows = theory.figure_rows(fig, args.lam)
        theory.write_sweep(rows, header, out / f"fig{fig}.csv")
        print(f"fig{fig}.csv: {len(rows)} rows")
    eta, w1 = theory.argmax_eta(args.lam)
    print(f"argmax eta of W1 at lam={args.lam:g}: {eta:.6f} (W1 = {w1:.1f})")


if __name__ == "__main__":
    main()
