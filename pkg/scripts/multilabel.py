"""Multi-label comparison of the feedforward baseline and the PICNN, over several seeds."""

import argparse
from pathlib import Path

from icnn import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/multilabel")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--data", default="synthetic", help="ARFF path or 'synthetic'")
    ap.add_argument("--label-count", type=int, default=10)
    args = ap.parse_args()
    for seed in args.seeds:
        out = Path(args.out) / f"seed{seed}"
        code = cli.main(["multilabel", "--seed", str(seed), "--epochs", str(args.epochs), "--data", args.data,
                         "--label-count", str(args.label_count), "--out", str(out)])
        if code:
            raise SystemExit(code)
        rows = [r.split(",") for r in (out / "metrics.csv").read_text().splitlines()[1:]]
        best = {m: max(float(r[4]) for r in rows if r[1] == m and r[2] == "test") for m in ("feedforward", "picnn")}
        print(f"seed {seed}: best test macro-F1 feedforward {best['feedforward']:.4f}, picnn {best['picnn']:.4f}")


if __name__ == "__main__":
    main()
