"""Self-checks behind ``sdit verify``: gradients, oracles and invariants.

Each group returns ``(name, passed, detail)`` rows. Everything runs at 64-bit.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Iterator

import numpy as np

from . import tensor as tn
from .diffusion import make_schedule, q_sample
from .model import ForwardProbe, ModelConfig, SditModel, _walk, block_forward, model_forward
from .rwkv import _shift_right, wkv
from .spiking import LifConfig, LifState, lif_step, spike

Row = tuple[str, bool, str]


def wkv_oracle(k: np.ndarray, v: np.ndarray, w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Direct double sum, no stabilization. For moderate k only."""
    bsz, length, _ = k.shape
    out = np.empty_like(v)
    for t in range(length):
        num = np.exp(u + k[:, t]) * v[:, t]
        den = np.exp(u + k[:, t])
        for i in range(t):
            e = np.exp(-(t - 1 - i) * w + k[:, i])
            num = num + e * v[:, i]
            den = den + e
        out[:, t] = num / den
    return out


def _projected(fn: Callable[..., tn.Tensor], rng) -> Callable[..., tn.Tensor]:
    """Turn a tensor-valued fn into a scalar via a fixed random projection."""
    cache = {}

    def f(*args):
        out = fn(*args)
        if "r" not in cache:
            cache["r"] = rng.normal(size=out.shape)
        return (out * cache["r"]).sum()

    return f


def _primitive_cases(rng) -> Iterator[tuple[str, Callable, list[np.ndarray]]]:
    n = lambda *s: rng.normal(size=s)
    away = lambda *s: np.sign(n(*s)) * rng.uniform(0.2, 1.5, s)  # no kinks near 0
    yield "add", tn.add, [n(2, 3, 4), n(4)]
    yield "sub", tn.sub, [n(2, 3), n(2, 3)]
    yield "mul", tn.mul, [n(2, 3, 4), n(3, 4)]
    yield "matmul", tn.matmul, [n(2, 3, 4), n(4, 2)]
    yield "sigmoid", tn.sigmoid, [n(3, 4)]
    yield "relu_squared", tn.relu_squared, [away(3, 4)]
    yield "exp", tn.exp, [n(3, 4)]
    yield "softplus", tn.softplus, [n(5)]
    yield "silu", tn.silu, [n(3, 4)]
    yield "sum", lambda x: tn.sum_(x, axis=1), [n(2, 3, 4)]
    yield "mean", lambda x: tn.mean(x, axis=-1), [n(2, 3)]
    yield "reshape", lambda x: tn.reshape(x, (6, 2)), [n(3, 4)]
    yield "permute", lambda x: tn.permute(x, (2, 0, 1)), [n(2, 3, 4)]
    yield "transpose", tn.transpose, [n(2, 3, 4)]
    yield "concat", lambda a, b: tn.concat([a, b], axis=1), [n(2, 2, 3), n(2, 1, 3)]
    yield "split", lambda x: tn.split(x, 1, [1, 2])[1] * 2.0 + tn.split(x, 1, [2, 1])[0].sum(), [n(2, 3)]
    yield "broadcast_to", lambda x: tn.broadcast_to(x, (2, 3, 4)), [n(2, 1, 4)]
    yield "layer_norm", lambda x, g, b: tn.layer_norm(x, g, b), [n(2, 3, 5), n(5), n(5)]
    yield "conv3x3", tn.conv3x3, [n(2, 2, 4, 5), n(3, 2, 3, 3), n(3)]
    yield "shift", _shift_right, [n(2, 4, 3)]
    yield "wkv", wkv, [n(2, 5, 3), n(2, 5, 3), rng.uniform(0.05, 2.0, 3), n(3)]
    yield "spike(smooth)", lambda u: spike(u, 2.0, smooth=True), [n(3, 4)]


def check_ops(seed: int = 0) -> list[Row]:
    rng = np.random.default_rng(seed)
    rows = []
    with tn.precision(64):
        for name, fn, arrays in _primitive_cases(rng):
            rep = tn.grad_check(_projected(fn, rng), [tn.Tensor(a) for a in arrays], tol=1e-5)
            rows.append((f"grad {name}", rep.passed, str(rep)))
    return rows


def check_block(seed: int = 0) -> list[Row]:
    """Finite differences through a full block with skip input, B=1, N=2, D=4, T=1."""
    rng = np.random.default_rng(seed)
    with tn.precision(64):
        cfg = ModelConfig(image_size=2, patch_size=1, hidden_dim=4, spike_steps=1)
        n, d = cfg.num_patches, cfg.hidden_dim
        # smooth spikes, reset kept in the graph: FD sees exactly what the tape sees
        lif = dataclasses.replace(cfg.lif, smooth=True, detach_reset=False)
        model = SditModel.init(cfg, rng)
        bp, z, w_skip = model.blocks[-1], model.recon_tokens[-1], model.skip_projs[0]
        bp.recon_d = tn.parameter(rng.normal(0, 0.5, bp.recon_d.shape))
        bp.recon_n = tn.parameter(rng.normal(0, 0.5, bp.recon_n.shape))
        leaves = [tn.Tensor(rng.normal(size=(1, n, d))), tn.Tensor(rng.normal(size=(1, n, d))),
                  z, w_skip] + [t for _, t in _walk(bp, "block")]

        def fn(x, xs, z_, ws, *params):
            block = _rebuild_block(bp, params)
            states = (LifState(), LifState())
            return block_forward(x, xs, block, z_, ws, states, lif)

        # the arctan step is sharp, so truncation error dominates at larger h
        rep = tn.grad_check(_projected(fn, rng), leaves, h=1e-6, tol=1e-4)
    return [("grad spiking block (B=1,N=2,D=4,T=1)", rep.passed, str(rep))]


def _rebuild_block(bp, flat):
    """Copy of ``bp`` with its tensors replaced, in ``_walk`` order."""
    it = iter(flat)

    def rebuild(obj):
        if isinstance(obj, tn.Tensor):
            return next(it)
        return dataclasses.replace(obj, **{f.name: rebuild(getattr(obj, f.name))
                                           for f in dataclasses.fields(obj)})

    return rebuild(bp)


def check_wkv(seed: int = 0, instances: int = 100) -> list[Row]:
    rng = np.random.default_rng(seed)
    worst_oracle, convex_ok, causal_ok, shift_err = 0.0, True, True, 0.0
    with tn.precision(64):
        for _ in range(instances):
            length, d = rng.integers(1, 17), rng.integers(1, 9)
            k, v = rng.normal(size=(2, 1, length, d))
            w, u = rng.uniform(0.0, 2.0, d), rng.normal(size=d)
            out = wkv(tn.Tensor(k), tn.Tensor(v), tn.Tensor(w), tn.Tensor(u)).data
            ref = wkv_oracle(k, v, w, u)
            worst_oracle = max(worst_oracle, float(np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1e-300))))
            lo = np.minimum.accumulate(v, axis=1)
            hi = np.maximum.accumulate(v, axis=1)
            tiny = 1e-12 * np.maximum(1.0, np.abs(v).max())
            convex_ok &= bool(np.all(out >= lo - tiny) and np.all(out <= hi + tiny))
            t = rng.integers(0, length)
            k2, v2 = k.copy(), v.copy()
            k2[:, t + 1:] += rng.normal(size=k2[:, t + 1:].shape)
            v2[:, t + 1:] += rng.normal(size=v2[:, t + 1:].shape)
            out2 = wkv(tn.Tensor(k2), tn.Tensor(v2), tn.Tensor(w), tn.Tensor(u)).data
            causal_ok &= bool(np.array_equal(out[:, :t + 1], out2[:, :t + 1]))
            out3 = wkv(tn.Tensor(k + 3.7), tn.Tensor(v), tn.Tensor(w), tn.Tensor(u)).data
            shift_err = max(shift_err, float(np.max(np.abs(out3 - out))))

        k, v = rng.normal(size=(2, 2, 6, 3))
        args = [tn.Tensor(a) for a in (k, v, rng.uniform(0.05, 2.0, 3), rng.normal(size=3))]
        rep = tn.grad_check(_projected(wkv, rng), args, tol=1e-5)
    return [
        ("wkv scan vs double-sum oracle", worst_oracle < 1e-10, f"max rel err {worst_oracle:.2e}"),
        ("wkv convex combination", convex_ok, f"{instances} instances"),
        ("wkv causality (bit-exact)", causal_ok, f"{instances} instances"),
        ("wkv invariant to shifting k", shift_err < 1e-12, f"max abs diff {shift_err:.2e}"),
        ("grad wkv", rep.passed, str(rep)),
    ]


def check_lif(seed: int = 0) -> list[Row]:
    rng = np.random.default_rng(seed)
    cfg = LifConfig()
    rows = []
    with tn.precision(64):
        st = LifState()
        binary, below = True, True
        for _ in range(8):
            s = lif_step(tn.Tensor(rng.normal(1.0, 2.0, (4, 16))), st, cfg)
            binary &= bool(np.all((s.data == 0.0) | (s.data == 1.0)))
            below &= bool(np.all(st.v.data < cfg.v_threshold))
        rows.append(("lif spikes are exactly 0/1", binary, "8 steps random drive"))
        rows.append(("lif membrane below threshold", below, "after every step"))

        st, silent = LifState(), True
        for _ in range(8):
            silent &= not lif_step(tn.zeros((3, 5)), st, cfg).data.any()
        rows.append(("lif silent on zero input", silent, "T=8"))

        st = LifState()
        s1 = lif_step(tn.Tensor([0.8]), st, cfg)
        v1 = st.v.data[0]
        s2 = lif_step(tn.Tensor([0.8]), st, cfg)
        h2 = 0.4 + (0.8 - 0.4) / 2
        trace_ok = abs(v1 - 0.4) < 1e-12 and s1.data[0] == 0 and s2.data[0] == 0 and abs(st.v.data[0] - h2) < 1e-12
        st = LifState()
        fired = lif_step(tn.Tensor([2.0]), st, cfg)
        trace_ok &= fired.data[0] == 1.0 and st.v.data[0] == 0.0
        rows.append(("lif hand-simulated traces", bool(trace_ok), "x=0.8 twice; x=2 once"))
    return rows


def check_recon(seed: int = 0) -> list[Row]:
    rng = np.random.default_rng(seed)
    with tn.precision(64):
        cfg = ModelConfig(image_size=4, patch_size=2, hidden_dim=8, spike_steps=2)
        model = SditModel.init(cfg, rng)
        x = rng.normal(size=(2, 1, 4, 4))
        t = np.array([3, 17])

        bp, z = model.blocks[0], model.recon_tokens[0]
        h = tn.Tensor(rng.normal(size=(2, cfg.num_patches, cfg.hidden_dim)))
        bp.recon_n = tn.parameter(np.zeros_like(bp.recon_n.data))
        pair = lambda: (LifState(), LifState())
        with_module = block_forward(h, None, bp, z, None, pair(), cfg.lif, True).data
        plain = block_forward(h, None, bp, z, None, pair(), cfg.lif, False).data
        identity_ok = np.array_equal(with_module, plain)

        model.zero_recon()
        zeroed = model_forward(model, x, t).data
        ablated = SditModel(**{f.name: getattr(model, f.name) for f in dataclasses.fields(model)})
        ablated.config = dataclasses.replace(cfg, use_recon=False)
        ablation_ok = np.array_equal(zeroed, model_forward(ablated, x, t).data)
    return [
        ("recon W_N=0 equals plain split", bool(identity_ok), "block output, bit-exact"),
        ("recon ablation equals zeroed maps", bool(ablation_ok), "model output, bit-exact"),
    ]


def skip_pairing(k: int, seed: int = 0) -> dict[int, list[int]]:
    """Input block -> output blocks whose skip input moved under a marker on it."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(image_size=4, patch_size=2, hidden_dim=8, spike_steps=1,
                      num_input_blocks=k, num_output_blocks=k)
    model = SditModel.init(cfg, rng)
    x = rng.normal(size=(1, 1, 4, 4))
    base = ForwardProbe()
    model_forward(model, x, 5, probe=base)
    found = {}
    for i in range(k):
        probe = ForwardProbe(skip_markers={i: 1000.0})
        model_forward(model, x, 5, probe=probe)
        found[i] = [j for j in range(k)
                    if not np.array_equal(probe.skip_inputs[j], base.skip_inputs[j])]
    return found


def check_skip(seed: int = 0) -> list[Row]:
    rows = []
    with tn.precision(64):
        for k in (1, 2, 4):
            found = skip_pairing(k, seed)
            ok = all(found[i] == [k - 1 - i] for i in range(k))
            rows.append((f"skip pairing K={k}", ok, str(found)))
    return rows


def check_schedule(seed: int = 0) -> list[Row]:
    rng = np.random.default_rng(seed)
    sched = make_schedule("linear", 1000, 1e-4, 0.02)
    ab = sched.alpha_bar
    mono = bool(np.all(np.diff(ab) < 0) and np.all((ab > 0) & (ab < 1)))
    rows = [("alpha_bar strictly decreasing in (0,1)", mono, f"final {ab[-1]:.3e}")]
    with tn.precision(64):
        for t in (10, 500, 999):
            x = q_sample(np.zeros((10_000, 1)), t, rng.standard_normal((10_000, 1)), sched).data
            rel = abs(x.var() / (1.0 - ab[t]) - 1.0)
            rows.append((f"q_sample variance t={t}", bool(rel < 0.03), f"rel dev {rel:.3%}"))
    return rows


GROUPS: dict[str, Callable[..., list[Row]]] = {
    "ops": check_ops,
    "block": check_block,
    "wkv": check_wkv,
    "lif": check_lif,
    "recon": check_recon,
    "skip": check_skip,
    "schedule": check_schedule,
}


def run_checks(only=None, seed: int = 0) -> list[tuple[str, str, bool, str]]:
    names = list(GROUPS) if not only else list(only)
    unknown = [n for n in names if n not in GROUPS]
    if unknown:
        raise KeyError(f"unknown check groups {unknown}; choose from {list(GROUPS)}")
    return [(g, name, ok, detail) for g in names for name, ok, detail in GROUPS[g](seed=seed)]
