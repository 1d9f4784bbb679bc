"""Fit PICNN classifiers to the 2-D circles and xor sets and dump decision grids as CSV.

Each row of ``<kind>_grid.csv`` is a grid point and the predicted probability of
class 1; ``<kind>_points.csv`` holds the training data.
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from icnn import data, learn, net


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/synthetic_2d")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--n", type=int, default=400)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    for kind in ("circles", "xor"):
        X, labels = data.synth_2d(kind, args.n, args.seed)
        Y = labels[:, None].astype(float)
        spec = net.NetworkSpec("picnn", 1, (32, 32), 2, (32, 32), "relu")
        params = net.init_params(spec, args.seed, 0.1)
        cfg = learn.FitConfig(epochs=args.epochs, batch=32, K=5, lr=3e-3, seed=args.seed)
        params, log = learn.fit(params, X, Y, cfg, learn.LossSpec("bce"))
        acc = float(((learn.predict(params, X, 1) >= 0.5)[:, 0] == labels).mean())
        print(f"{kind}: final train loss {log[-1][2]:.4f}, train accuracy {acc:.3f}")

        g = np.linspace(-1.5, 1.5, 61)
        G = np.array([(a, b) for a in g for b in g])
        P = learn.predict(params, G, 1)[:, 0]
        with open(out / f"{kind}_grid.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x0", "x1", "p1"])
            w.writerows((f"{a:.3f}", f"{b:.3f}", f"{p:.6f}") for (a, b), p in zip(G, P))
        with open(out / f"{kind}_points.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x0", "x1", "label"])
            w.writerows((f"{a:.6f}", f"{b:.6f}", int(c)) for (a, b), c in zip(X, labels))


if __name__ == "__main__":
    main()
