"""Train the toy model with and without the reconstruction module and compare loss curves.

    python3 scripts/ablation_toy.py --steps 500 --seeds 7 8 9
"""

import argparse
from pathlib import Path

import numpy as np

from sdit import cli


def run(out: Path, seed: int, steps: int, ablate: bool) -> np.ndarray:
    argv = ["train", "--toy", "bars", "--size", "8", "--steps", str(steps), "--seed", str(seed),
            "--out", str(out), "--ckpt-every", str(steps)]
    if ablate:
        argv.append("--no-recon-module")
    if cli.main(argv):
        raise SystemExit(f"training failed for {out}")
    return np.loadtxt(out / "loss.csv", delimiter=",", skiprows=1)[:, 1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seeds", type=int, nargs="+", default=[7])
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        for ablate in (False, True):
            tag = "no_recon" if ablate else "recon"
            loss = run(args.out / f"{tag}_s{seed}", seed, args.steps, ablate)
            rows.append((seed, tag, loss[-50:].mean()))
    print("seed,variant,last50_mean_loss")
    for seed, tag, value in rows:
        print(f"{seed},{tag},{value:.5f}")


if __name__ == "__main__":
    main()
