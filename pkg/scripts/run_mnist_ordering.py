"""Train NT, BAT and DeepFool-AT on the MNIST subset and compare them.

    BLINDAT_MNIST=data/mnist python scripts/run_mnist_ordering.py --out runs/mnist

Writes clean accuracy, DeepFool mean norm and avg-AA at a shared theta
(half of the BAT mean norm) to summary.csv, white-box DeepFool curves per
model, and the black-box curve with NT as source and BAT as target.
"""

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from blindat import attacks, data, evaluation
from blindat.attacks import AttackSpec
from blindat.nn import predict, save_model
from blindat.training import TrainConfig, train_bat, train_df_at, train_nt

TRAINERS = {"nt": train_nt, "bat": train_bat, "df-at": train_df_at}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", help="IDX directory (default: $BLINDAT_MNIST)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--out", default="runs/mnist")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tr, te = data.load_mnist(args.root, seed=args.seed)
    print(f"{len(tr)} train / {len(te)} test", file=sys.stderr)
    cfg = TrainConfig(sizes=(784, 128, 10), epochs=args.epochs, lr=1e-3, seed=args.seed)
    df = AttackSpec("deepfool")

    models, batches = {}, {}
    for name, fn in TRAINERS.items():
        rep = fn(cfg, tr.images, tr.labels)
        rep.to_csv(out / f"train_{name}.csv")
        save_model(rep.model, out / f"{name}.bin")
        models[name] = rep.model
        batches[name] = attacks.generate(rep.model, te.images, te.labels, df)
        print(f"{name}: clean {np.mean(predict(rep.model, te.images) == te.labels):.4f}", file=sys.stderr)

    norms = {k: float(np.mean(b.norms_l2)) for k, b in batches.items()}
    grid = np.linspace(0.0, 1.2 * max(norms.values()), 61)
    theta = norms["bat"] / 2
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["defense", "clean", "mean_norm", "theta", "avg_aa"])
        for name, m in models.items():
            curve = evaluation.aa_curve(m, te.images, te.labels, df, grid, deltas=batches[name])
            curve.to_csv(out / f"whitebox_{name}.csv")
            w.writerow([name, curve.accuracy[0], norms[name], theta, evaluation.avg_aa(curve, theta)])
    bb = evaluation.blackbox_eval(models["nt"], models["bat"], te.images, te.labels, df, grid)
    bb.to_csv(out / "blackbox_nt_to_bat.csv")
    print(f"wrote {out}", file=sys.stderr)


if __name__ == "__main__":
    main()
