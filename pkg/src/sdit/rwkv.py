"""RWKV token mixing: token shift, the WKV scan, Time-Mixing, Channel-Mixing.

Row-vector convention throughout: a projection is ``x @ W`` with ``W`` of
shape ``[D_in, D_out]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import NonFinite, ShapeMismatch
from .tensor import Tensor, primitive


@dataclass
class TimeMixParams:
    w_r: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    decay: Tensor  # raw; the scan uses softplus(decay) >= 0
    bonus: Tensor
    mix_r: Tensor  # raw; token shift uses sigmoid(mix)
    mix_k: Tensor
    mix_v: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int) -> "TimeMixParams":
        std = 1.0 / np.sqrt(d)
        mat = lambda: tn.parameter(rng.normal(0.0, std, (d, d)))
        return cls(
            w_r=mat(), w_k=mat(), w_v=mat(), w_o=mat(),
            decay=tn.parameter(np.linspace(-3.0, 3.0, d)),
            bonus=tn.parameter(np.zeros(d)),
            mix_r=tn.parameter(np.zeros(d)),
            mix_k=tn.parameter(np.zeros(d)),
            mix_v=tn.parameter(np.zeros(d)),
        )


@dataclass
class ChannelMixParams:
    w_r: Tensor
    w_k: Tensor  # [D, D_ff]
    w_v: Tensor  # [D_ff, D]
    mix_r: Tensor
    mix_k: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_ff: int) -> "ChannelMixParams":
        return cls(
            w_r=tn.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))),
            w_k=tn.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), (d, d_ff))),
            w_v=tn.parameter(rng.normal(0.0, 1.0 / np.sqrt(d_ff), (d_ff, d))),
            mix_r=tn.parameter(np.zeros(d)),
            mix_k=tn.parameter(np.zeros(d)),
        )


def _shift_right(x: Tensor) -> Tensor:
    """Move every token one position later along axis -2; zeros enter first."""
    out = np.zeros_like(x.data)
    out[..., 1:, :] = x.data[..., :-1, :]

    def back(g):
        gx = np.zeros_like(g)
        gx[..., :-1, :] = g[..., 1:, :]
        return (gx,)

    return primitive(out, (x,), back, "shift")


def token_shift(x: Tensor, mu: Tensor) -> Tensor:
    """``mu * x[t] + (1 - mu) * x[t-1]`` with a zero row before the first token."""
    if x.ndim != 3 or mu.shape != (x.shape[-1],):
        raise ShapeMismatch(f"token_shift x{x.shape} mu{mu.shape}")
    return mu * x + (1.0 - mu) * _shift_right(x)


# ------------------------------------------------------------------------ WKV


def _wkv_forward(k, v, w, u):
    """Stabilized recurrence.

    State (a, b, p) holds the decayed numerator/denominator sums scaled by
    exp(-p), where p is the running max exponent.
    """
    bsz, length, d = k.shape
    out = np.empty_like(v)
    logz = np.empty_like(v)
    p_hist = np.empty_like(v)
    a = np.zeros((bsz, d), dtype=v.dtype)
    b = np.zeros((bsz, d), dtype=v.dtype)
    p = np.full((bsz, d), -np.inf, dtype=v.dtype)
    for t in range(length):
        kt, vt = k[:, t], v[:, t]
        ww = u + kt
        q = np.maximum(p, ww)
        e1, e2 = np.exp(p - q), np.exp(ww - q)
        den = e1 * b + e2
        out[:, t] = (e1 * a + e2 * vt) / den
        logz[:, t] = q + np.log(den)
        p_hist[:, t] = p
        ww = p - w
        q = np.maximum(ww, kt)
        e1, e2 = np.exp(ww - q), np.exp(kt - q)
        a = e1 * a + e2 * vt
        b = e1 * b + e2
        p = q
    return out, logz, p_hist


def _wkv_backward(g, k, v, w, u, out, logz, p_hist):
    bsz, length, d = k.shape
    gk = np.empty_like(k)
    gv = np.empty_like(v)

    # bonus-term contributions (t == i)
    wt_self = np.exp(u + k - logz)
    gv[:] = g * wt_self
    gself = g * wt_self * (v - out)
    gu = gself.sum(axis=(0, 1))

    # decay: forward sweep carrying position-weighted sums, same scaling as (a, b)
    gw = np.zeros_like(w)
    a = np.zeros((bsz, d), dtype=v.dtype)
    b = np.zeros_like(a)
    c = np.zeros_like(a)
    e = np.zeros_like(a)
    for t in range(length):
        p = p_hist[:, t]
        scale = np.exp(p - logz[:, t])
        gw -= (g[:, t] * (c - out[:, t] * e) * scale).sum(axis=0)
        ww = p - w
        q = np.maximum(ww, k[:, t])
        e1, e2 = np.exp(ww - q), np.exp(k[:, t] - q)
        c = (c + a) * e1
        e = (e + b) * e1
        a = e1 * a + e2 * v[:, t]
        b = e1 * b + e2

    # reverse sweep: r = sum_{t>i} decay^(t-1-i) g_t / Z_t, s = same with g_t * wkv_t
    r = np.zeros((bsz, d), dtype=v.dtype)
    s = np.zeros_like(r)
    m = np.full((bsz, d), -np.inf, dtype=v.dtype)
    for i in range(length - 1, -1, -1):
        ek = np.exp(k[:, i] + m)
        gv[:, i] += ek * r
        gk[:, i] = ek * (v[:, i] * r - s) + gself[:, i]
        m_new = np.maximum(-logz[:, i], m - w)
        f_new = np.exp(-logz[:, i] - m_new)
        f_old = np.exp(m - w - m_new)
        r = g[:, i] * f_new + r * f_old
        s = g[:, i] * out[:, i] * f_new + s * f_old
        m = m_new
    return gk, gv, gw, gu


def wkv(k: Tensor, v: Tensor, w: Tensor, u: Tensor) -> Tensor:
    """WKV over ``[B, L, D]`` with a non-negative per-channel decay ``w``."""
    if k.ndim != 3 or v.shape != k.shape or w.shape != (k.shape[-1],) or u.shape != w.shape:
        raise ShapeMismatch(f"wkv k{k.shape} v{v.shape} w{w.shape} u{u.shape}")
    for x in (k, v, w, u):
        if not np.all(np.isfinite(x.data)):
            raise NonFinite("wkv input contains NaN or Inf")
    if np.any(w.data < 0):
        raise ValueError("wkv decay must be non-negative")
    out, logz, p_hist = _wkv_forward(k.data, v.data, w.data, u.data)

    def back(g):
        # looked up at call time so fault-injection tests can swap it
        return _wkv_backward(g, k.data, v.data, w.data, u.data, out, logz, p_hist)

    return primitive(out, (k, v, w, u), back, "wkv")


def wkv_scan(k: Tensor, v: Tensor, decay: Tensor, bonus: Tensor) -> Tensor:
    return wkv(k, v, tn.softplus(decay), bonus)


# --------------------------------------------------------------------- mixing


def time_mixing(x: Tensor, p: TimeMixParams) -> Tensor:
    r = token_shift(x, tn.sigmoid(p.mix_r)) @ p.w_r
    k = token_shift(x, tn.sigmoid(p.mix_k)) @ p.w_k
    v = token_shift(x, tn.sigmoid(p.mix_v)) @ p.w_v
    return (tn.sigmoid(r) * wkv_scan(k, v, p.decay, p.bonus)) @ p.w_o


def channel_mixing(x: Tensor, p: ChannelMixParams) -> Tensor:
    r = token_shift(x, tn.sigmoid(p.mix_r)) @ p.w_r
    k = token_shift(x, tn.sigmoid(p.mix_k)) @ p.w_k
    return tn.sigmoid(r) * (tn.relu_squared(k) @ p.w_v)
