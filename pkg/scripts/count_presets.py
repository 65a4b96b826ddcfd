"""Parameter and MAC counts for every preset, next to the published MNIST figures.

Patch size and counting convention of the reference are unknown, so the
comparison is informational. ``--patch`` sweeps the patch size.
"""

import argparse
import dataclasses

from sdit.model import PRESETS, count_macs, count_params

REFERENCE = {"params": 11.67e6, "macs": 1.32e9}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--patch", type=int, nargs="+", default=[2, 4, 7])
    args = ap.parse_args()

    print("preset,patch,tokens,params_M,macs_per_step_G,macs_total_G")
    for name, cfg in PRESETS.items():
        for p in args.patch:
            if cfg.image_size % p:
                continue
            c = dataclasses.replace(cfg, patch_size=p)
            m = count_macs(c)
            print(f"{name},{p},{c.num_patches},{count_params(c) / 1e6:.3f},"
                  f"{m['per_spike_step'] / 1e9:.3f},{m['total'] / 1e9:.3f}")
    print(f"reference,?,?,{REFERENCE['params'] / 1e6:.2f},,{REFERENCE['macs'] / 1e9:.2f}")


if __name__ == "__main__":
    main()
