"""Image completion with bundle-entropy and projected-gradient inference, plus K = 1 vs K = 5."""

import argparse
from pathlib import Path

from icnn import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/completion")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--data", default="synthetic", help="directory of PGM files, image CSV, or 'synthetic'")
    args = ap.parse_args()
    for solver, k in (("bundle", 5), ("bundle", 1), ("gradient", 5)):
        out = Path(args.out) / f"{solver}_k{k}"
        code = cli.main(["complete", "--seed", str(args.seed), "--epochs", str(args.epochs), "--data", args.data,
                         "--solver", solver, "--k", str(k), "--out", str(out)])
        if code:
            raise SystemExit(code)


if __name__ == "__main__":
    main()
