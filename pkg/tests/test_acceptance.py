"""One test per acceptance criterion; each prints a PASS/FAIL line with the measured value."""

import struct
import time

import numpy as np
import pytest

from sdit import cli
from sdit import tensor as tn
from sdit.data_io import load_idx, read_pnm, u8_to_unit, unit_to_u8
from sdit.errors import BadMagic, DimMismatch, TruncatedFile
from sdit.model import PRESETS, ModelConfig, SditModel, count_macs, count_params
from sdit.rwkv import wkv
from sdit.verify import (check_block, check_lif, check_ops, check_recon, check_schedule,
                         skip_pairing, wkv_oracle)


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, f"criterion {n} ({title}): {detail}"

    return emit


def _rows_ok(rows):
    return all(ok for _, ok, _ in rows), "; ".join(f"{name}: {detail}" for name, _, detail in rows)


def test_c01_gradient_correctness(report):
    t0 = time.perf_counter()
    prim = check_ops(seed=0)
    block = check_block(seed=0)
    dt = time.perf_counter() - t0
    worst = max(float(d.split("max rel err ")[1].split()[0]) for _, _, d in prim)
    ok = all(r[1] for r in prim + block) and dt < 60
    report(1, "gradients vs central differences (64-bit)", ok,
           f"{len(prim)} primitives worst rel err {worst:.2e} (tol 1e-5); "
           f"{block[0][2]}; {dt:.1f}s (limit 60s)")


def test_c02_wkv_oracle(report):
    rng = np.random.default_rng(2)
    worst = 0.0
    with tn.precision(64):
        for _ in range(100):
            length, d = rng.integers(1, 17), rng.integers(1, 9)
            k, v = rng.normal(size=(2, 1, length, d))
            w, u = rng.uniform(0.0, 2.0, d), rng.normal(size=d)
            out = wkv(*map(tn.tensor, (k, v, w, u))).data
            ref = wkv_oracle(k, v, w, u)
            worst = max(worst, float(np.max(np.abs(out - ref) / np.abs(ref))))
    report(2, "stabilized scan vs direct double sum", worst < 1e-10,
           f"100 instances (L<=16, D<=8), max rel err {worst:.2e} (tol 1e-10)")


def test_c03_wkv_convexity_causality(report):
    rng = np.random.default_rng(3)
    convex = causal = 0
    with tn.precision(64):
        for _ in range(100):
            length, d = rng.integers(1, 17), rng.integers(1, 9)
            k, v = rng.normal(size=(2, 1, length, d))
            w, u = rng.uniform(0.0, 2.0, d), rng.normal(size=d)
            out = wkv(*map(tn.tensor, (k, v, w, u))).data
            tiny = 1e-12 * max(1.0, np.abs(v).max())
            convex += bool(np.all(out >= np.minimum.accumulate(v, axis=1) - tiny)
                           and np.all(out <= np.maximum.accumulate(v, axis=1) + tiny))
            t = rng.integers(0, length)
            k2, v2 = k.copy(), v.copy()
            k2[:, t + 1:] += rng.normal(size=k2[:, t + 1:].shape) * 5
            v2[:, t + 1:] += rng.normal(size=v2[:, t + 1:].shape) * 5
            out2 = wkv(*map(tn.tensor, (k2, v2, w, u))).data
            causal += bool(np.array_equal(out[:, :t + 1], out2[:, :t + 1]))
    report(3, "wkv convex combination and causality", convex == 100 and causal == 100,
           f"convex {convex}/100, bit-exact causal {causal}/100")


def test_c04_lif_contract(report):
    ok, detail = _rows_ok(check_lif(seed=4))
    report(4, "LIF binary spikes, silence, hand traces", ok, detail)


def test_c05_reconstruction_identity(report):
    ok, detail = _rows_ok(check_recon(seed=5))
    report(5, "reconstruction module identities", ok, detail)


def test_c06_skip_pairing(report):
    with tn.precision(64):
        found = {k: skip_pairing(k, seed=6) for k in (1, 2, 4)}
    ok = all(found[k] == {i: [k - 1 - i] for i in range(k)} for k in found)
    report(6, "input block i feeds output block K-1-i", ok,
           ", ".join(f"K={k}: {v}" for k, v in found.items()))


def test_c07_schedule(report):
    ok, detail = _rows_ok(check_schedule(seed=0))
    report(7, "alpha_bar monotone; q_sample variance within 3%", ok, detail)


TRAIN_ARGS = ["train", "--toy", "bars", "--size", "8", "--hidden-dim", "32",
              "--input-blocks", "1", "--mid-blocks", "1", "--output-blocks", "1",
              "--spike-steps", "2", "--diffusion-steps", "50", "--lr", "1e-4", "--seed", "7"]


def test_c08_training_signal(report, tmp_path):
    out = tmp_path / "c8"
    t0 = time.perf_counter()
    code = cli.main(TRAIN_ARGS + ["--steps", "500", "--out", str(out), "--ckpt-every", "500"])
    dt = time.perf_counter() - t0
    loss = np.loadtxt(out / "loss.csv", delimiter=",", skiprows=1)[:, 1]
    first, last = loss[:50].mean(), loss[-50:].mean()
    code_s = cli.main(["sample", "--ckpt", str(out / "final.ckpt"), "--n", "16", "--seed", "1"])
    grid = read_pnm(out / "samples" / "samples_seed1.pgm")
    raw = (out / "samples" / "samples_seed1.pgm").read_bytes()
    samples = np.load(out / "samples" / "samples_seed1.npy")
    pgm_ok = raw.startswith(b"P5\n38 38\n255\n") and grid.shape == (38, 38, 1)
    ok = (code == 0 and code_s == 0 and last <= 0.5 * first and dt < 600
          and pgm_ok and np.all(np.isfinite(samples)))
    report(8, "desk-scale loss drop and sampling", ok,
           f"first-50 mean {first:.4f}, last-50 mean {last:.4f}, ratio {last / first:.3f} "
           f"(limit 0.5); train {dt:.0f}s (limit 600s); 16 samples finite, PGM 38x38 valid={pgm_ok}")


def _run(tmp_path, name):
    out = tmp_path / name
    assert cli.main(TRAIN_ARGS + ["--steps", "40", "--ckpt-every", "20", "--deterministic",
                                  "--out", str(out)]) == 0
    assert cli.main(["sample", "--ckpt", str(out / "final.ckpt"), "--n", "4", "--seed", "3",
                     "--deterministic"]) == 0
    files = ["loss.csv", "final.ckpt", "checkpoints/step_000020.ckpt",
             "samples/samples_seed3.pgm", "samples/samples_seed3.npy"]
    return {f: (out / f).read_bytes() for f in files}


def test_c09_determinism(report, tmp_path):
    a, b = _run(tmp_path, "a"), _run(tmp_path, "b")
    same = [f for f in a if a[f] == b[f]]
    report(9, "byte-identical artifacts across runs", len(same) == len(a),
           f"identical: {len(same)}/{len(a)} ({', '.join(same)})")


def test_c10_counting(report, capsys):
    cfg = ModelConfig(image_size=4, patch_size=2, hidden_dim=8, spike_steps=2,
                      num_input_blocks=0, num_mid_blocks=1, num_output_blocks=0)
    d, n, pd, ff = 8, 4, 4, 32
    params = ((pd * d + d) + n * d + 2 * (d * d + d)             # embeddings
              + 4 * d + 4 * d * d + 5 * d                       # norms, time mixing
              + d * d + 2 * d * ff + 2 * d                      # channel mixing
              + 2 * n * d + n * d                               # recon maps and token
              + d * pd + pd + 9 + 1)                            # head
    macs = (n * pd * d + 2 * d * d) + 2 * (
        2 * n * 4 * d * d + 2 * n * (d * d + 2 * d * ff) + 2 * n * n * d + n * d * pd + 16 * 9)
    m = SditModel.init(cfg, np.random.default_rng(0))
    live = sum(t.data.size for t in m.parameters())
    tally_ok = count_params(cfg) == params == live and count_macs(cfg)["total"] == macs
    assert cli.main(["count", "--preset", "mnist"]) == 0
    printed = capsys.readouterr().out
    mnist = PRESETS["mnist"]
    ok = tally_ok and "11.67 M" in printed and "1.32 G" in printed
    report(10, "param/MAC counter vs hand tally; MNIST preset report", ok,
           f"one block: params {count_params(cfg)} (hand {params}, live {live}), "
           f"MACs {count_macs(cfg)['total']} (hand {macs}); MNIST preset "
           f"{count_params(mnist) / 1e6:.2f} M params, {count_macs(mnist)['total'] / 1e9:.2f} G MACs "
           f"vs reference 11.67 M / 1.32 G (informational)")


def test_c11_idx_and_pixels(report, tmp_path):
    p = np.arange(256, dtype=np.uint8)
    roundtrip = bool(np.array_equal(unit_to_u8(u8_to_unit(p)), p))
    endpoints = u8_to_unit(0) == -1.0 and u8_to_unit(255) == 1.0
    f = tmp_path / "x.idx"
    header = lambda magic, dims: struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims)
    cases = {"bad magic": (header(0x801, (1, 28, 28)) + bytes(784), BadMagic),
             "short payload": (header(0x803, (1, 28, 28)) + bytes(100), TruncatedFile),
             "short header": (b"\x00\x00\x08\x03\x00\x00\x00\x01", TruncatedFile),
             "empty dim": (header(0x803, (0, 28, 28)), DimMismatch)}
    raised = {}
    for name, (raw, err) in cases.items():
        f.write_bytes(raw)
        try:
            load_idx(f)
            raised[name] = False
        except err:
            raised[name] = True
    f.write_bytes(header(0x803, (1, 28, 28)) + bytes(784))
    good = load_idx(f).images
    ok = roundtrip and endpoints and all(raised.values()) and np.all(good == -1.0)
    report(11, "u8 <-> [-1,1] round trip; malformed IDX errors", ok,
           f"256/256 round trip={roundtrip}, exact endpoints={endpoints}, errors {raised}")
