"""Dense tensors with define-by-run reverse-mode differentiation.

Every op returns a fresh :class:`Tensor`; when gradient recording is on and
an input requires grad, the result keeps references to its parents and a
closure mapping the output gradient to per-parent gradients. ``backward``
orders the reachable records topologically (:class:`Tape`) and walks them
once in reverse.

Broadcasting is limited to suffix shapes: a ``[D]`` operand may meet a
``[B, L, D]`` one, but ``[B, 1, D]`` may not. Anything else goes through
:func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (BadParam, DisconnectedGraph, NonFinite, NotScalar, ShapeMismatch,
                     SplitSizeMismatch)

_DTYPE = np.float64
_local = threading.local()


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the dtype new tensors are created with."""
    old = _DTYPE
    set_default_dtype({32: np.float32, 64: np.float64}[bits])
    try:
        yield
    finally:
        set_default_dtype(old)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    old = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return _from_array(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _from_array(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    t.op = "leaf"
    return t


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zeros(shape) -> Tensor:
    return _from_array(np.zeros(shape, dtype=_DTYPE))


def ones(shape) -> Tensor:
    return _from_array(np.ones(shape, dtype=_DTYPE))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def primitive(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = _from_array(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


# ---------------------------------------------------------------- elementwise


def _check_suffix(sa, sb) -> None:
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if tuple(long_[len(long_) - len(short):]) != tuple(short):
        raise ShapeMismatch(f"shapes {sa} and {sb} only broadcast over leading dims")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape)
    return primitive(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape)
    return primitive(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape)
    return primitive(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def neg(a: Tensor) -> Tensor:
    return primitive(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))
    return primitive(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu_squared(x: Tensor) -> Tensor:
    r = np.maximum(x.data, 0.0)
    return primitive(r * r, (x,), lambda g: (2.0 * r * g,), "relu_squared")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    if not np.all(np.isfinite(out)):
        raise NonFinite("exp overflowed")
    return primitive(out, (x,), lambda g: (g * out,), "exp")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))
    return primitive(out, (x,), lambda g: (g * s,), "softplus")


def silu(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))
    return primitive(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),), "silu")


# ------------------------------------------------------------------ reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return primitive(np.asarray(out), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / n)


# ------------------------------------------------------------------ structural


def reshape(x: Tensor, shape) -> Tensor:
    return primitive(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return primitive(
        np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (g.transpose(inv),), "permute",
    )


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeMismatch("transpose needs at least 2 dims")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeMismatch(f"cannot concat {ref} with {x.shape} on axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return primitive(
        np.concatenate([x.data for x in xs], axis=ax), xs,
        lambda g: tuple(np.split(g, bounds, axis=ax)), "concat",
    )


def _slice(x: Tensor, ax: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return primitive(x.data[idx].copy(), (x,), back, "slice")


def split(x: Tensor, axis: int, sizes: Sequence[int]) -> tuple[Tensor, ...]:
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax] or any(s < 0 for s in sizes):
        raise SplitSizeMismatch(f"sizes {list(sizes)} do not sum to {x.shape[ax]}")
    outs, start = [], 0
    for s in sizes:
        outs.append(_slice(x, ax, start, start + s))
        start += s
    return tuple(outs)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    lead = len(shape) - x.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1
    )

    def back(g):
        return (g.sum(axis=axes, keepdims=True).reshape(x.shape),)

    return primitive(out.copy(), (x,), back, "broadcast")


# -------------------------------------------------------------- linear algebra


def _check_finite(*arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFinite("input contains NaN or Inf")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., M, K] @ [K, P]``; leading dims of ``a`` are batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    _check_finite(a.data, b.data)
    k, p = b.shape

    def back(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, p)
        return ga, gb

    return primitive(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm params {gamma.shape}/{beta.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd

    def back(g):
        lead = tuple(range(g.ndim - 1))
        gh = g * gamma.data
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return primitive(xhat * gamma.data + beta.data, (x, gamma, beta), back, "layer_norm")


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3) or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv3x3 x{x.shape} w{w.shape} b{b.shape}")
    _, _, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # [B, C, H, W, 3, 3]
    out = np.einsum("bchwij,ocij->bohw", win, w.data) + b.data[None, :, None, None]

    def back(g):
        gw = np.einsum("bchwij,bohw->ocij", win, g)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i:i + h, j:j + wd] += np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j])
        return gxp[:, :, 1:-1, 1:-1], gw, g.sum(axis=(0, 2, 3))

    return primitive(out, (x, w, b), back, "conv3x3")


# -------------------------------------------------------------------- backward


class Tape:
    """Records reachable from ``output``, in the order they were executed.

    Built fresh per backward call: the graph is whatever the last forward
    pass produced.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.records: list[Tensor] = []
        self.leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.records.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            if node.is_leaf:
                self.leaves.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def run(self, seed: np.ndarray) -> dict[int, np.ndarray]:
        """Propagate ``seed`` back; returns leaf gradients keyed by ``id``."""
        grads: dict[int, np.ndarray] = {id(self.output): seed}
        leaf_grads: dict[int, np.ndarray] = {}
        for node in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                target = leaf_grads if p.is_leaf else grads
                prev = target.get(id(p))
                target[id(p)] = gp if prev is None else prev + gp
        if self.output.is_leaf:
            leaf_grads[id(self.output)] = seed
        return leaf_grads


def _seed(loss: Tensor) -> np.ndarray:
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DisconnectedGraph("loss does not depend on any tensor requiring grad")
    return np.ones_like(loss.data)


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into every reachable leaf's ``grad``."""
    tape = Tape(loss)
    leaf_grads = tape.run(_seed(loss))
    if not leaf_grads:
        raise DisconnectedGraph("no leaf reached")
    for leaf in tape.leaves:
        g = leaf_grads.get(id(leaf))
        if g is not None:
            leaf.grad = leaf.grad + g.reshape(leaf.shape)


def gradients(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt`` without touching ``.grad``.

    Unreached tensors get zeros.
    """
    leaf_grads = Tape(loss).run(_seed(loss))
    return [leaf_grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape) for t in wrt]


# ------------------------------------------------------------------ checking


@dataclass
class CheckReport:
    max_rel_err: float
    max_abs_err: float
    tol: float
    n_checked: int
    worst: tuple[int, int] | None = None  # (input index, flat element index)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tol)

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.0e}), "
                f"max abs err {self.max_abs_err:.3e} over {self.n_checked} entries")


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    floor: float = 1e-4,
) -> CheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps round-off on near-zero entries from reading as a large ratio.
    The default ``h`` sits near eps**(1/3), where central-difference
    truncation and round-off errors balance at 64-bit.
    """
    if not 1e-7 <= h <= 1e-3:
        raise BadParam(f"step h={h} outside [1e-7, 1e-3]")
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    leaves = [parameter(x.data) for x in inputs]
    analytic = gradients(f(*leaves), leaves)

    worst_rel, worst_abs, worst, n = 0.0, 0.0, None, 0
    with no_grad():
        for k, x in enumerate(inputs):
            base = x.data.astype(np.float64)
            for j in range(base.size):
                vals = []
                for sign in (1.0, -1.0):
                    pert = base.copy().reshape(-1)
                    pert[j] += sign * h
                    args = [_from_array(a.data) for a in inputs]
                    args[k] = _from_array(pert.reshape(base.shape).astype(x.dtype))
                    vals.append(float(f(*args).data))
                num = (vals[0] - vals[1]) / (2.0 * h)
                ana = float(analytic[k].reshape(-1)[j])
                abs_err = abs(ana - num)
                rel = abs_err / max(abs(ana), abs(num), floor)
                n += 1
                worst_abs = max(worst_abs, abs_err)
                if rel > worst_rel:
                    worst_rel, worst = rel, (k, j)
    return CheckReport(worst_rel, worst_abs, tol, n, worst)
