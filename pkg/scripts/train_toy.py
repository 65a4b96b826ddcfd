"""Desk-scale run: train on toy bars, report the loss drop, draw a sample grid.

    python3 scripts/train_toy.py --out runs/toy --steps 500
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from sdit import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/toy"))
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--kind", choices=["bars", "blobs"], default="bars")
    args = ap.parse_args()

    code = cli.main(["train", "--toy", args.kind, "--size", "8", "--steps", str(args.steps),
                     "--seed", str(args.seed), "--out", str(args.out)])
    if code:
        return code
    loss = np.loadtxt(args.out / "loss.csv", delimiter=",", skiprows=1)[:, 1]
    w = min(50, len(loss))
    print(f"first {w} mean {loss[:w].mean():.4f}  last {w} mean {loss[-w:].mean():.4f}  "
          f"ratio {loss[-w:].mean() / loss[:w].mean():.3f}")
    return cli.main(["sample", "--ckpt", str(args.out / "final.ckpt"), "--n", "16", "--seed", "1"])


if __name__ == "__main__":
    sys.exit(main())
