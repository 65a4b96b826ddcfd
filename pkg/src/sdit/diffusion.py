"""DDPM forward process, noise-prediction objective, ancestral sampler, AdamW."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .errors import BadRange, OutOfRange, ShapeMismatch
from .tensor import Tensor

NoisePredictor = Callable[[Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.beta)


def make_schedule(kind: str = "linear", num_steps: int = 1000,
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if kind != "linear":
        raise BadRange(f"unknown schedule kind {kind!r}")
    if num_steps < 1 or not (0 < beta_start <= beta_end < 1):
        raise BadRange(f"need num_steps >= 1 and 0 < beta_start <= beta_end < 1, "
                       f"got {num_steps}, {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _check_steps(t, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.num_steps):
        raise OutOfRange(f"diffusion step outside [0, {sched.num_steps})")
    return t


def _per_item(values: np.ndarray, t: np.ndarray, ndim: int, dtype) -> np.ndarray:
    v = values[t].astype(dtype)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(x0, t, eps, sched: NoiseSchedule) -> Tensor:
    """Noised images; ``t`` is a scalar or one step per batch item."""
    x0, eps = tn.as_tensor(x0).data, tn.as_tensor(eps).data
    if eps.shape != x0.shape:
        raise ShapeMismatch(f"noise shape {eps.shape} != image shape {x0.shape}")
    t = np.broadcast_to(_check_steps(t, sched), x0.shape[:1])
    ab = _per_item(sched.alpha_bar, t, x0.ndim, x0.dtype)
    return tn.Tensor(np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps)


def _loss_terms(model: NoisePredictor, x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                sched: NoiseSchedule) -> Tensor:
    x_t = q_sample(x0, t, eps, sched)
    diff = model(x_t, t) - eps
    return (diff * diff).sum()


def loss_step(x0, model: NoisePredictor, sched: NoiseSchedule, rng: np.random.Generator,
              params: Sequence[Tensor] | None = None, jobs: int = 1) -> float:
    """One noise-prediction MSE evaluation with gradients.

    Without ``params`` the loss is backpropagated into every leaf's ``.grad``.
    With ``params`` the batch is split into ``jobs`` shards evaluated
    concurrently; shard gradients are summed in shard order and added to
    ``params[i].grad``, so the result does not depend on thread timing.
    """
    x0 = np.asarray(tn.as_tensor(x0).data)
    bsz = len(x0)
    t = rng.integers(0, sched.num_steps, size=bsz)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    scale = 1.0 / x0.size

    if params is None:
        loss = _loss_terms(model, x0, t, eps, sched) * scale
        tn.backward(loss)
        return loss.item()

    bounds = np.linspace(0, bsz, min(jobs, bsz) + 1).astype(int)
    shards = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]

    def run(sl):
        loss = _loss_terms(model, x0[sl], t[sl], eps[sl], sched) * scale
        return loss.item(), tn.gradients(loss, params)

    if len(shards) == 1:
        results = [run(shards[0])]
    else:
        with ThreadPoolExecutor(len(shards)) as pool:
            results = list(pool.map(run, shards))
    total = 0.0
    for value, grads in results:
        total += value
        for p, g in zip(params, grads):
            p.grad = p.grad + g
    return total


def ddpm_sample(model: NoisePredictor, sched: NoiseSchedule, n: int, shape: tuple[int, ...],
                rng: np.random.Generator, stride: int | None = None) -> np.ndarray:
    """Ancestral sampling from pure noise; ``shape`` is ``(C, H, W)``.

    With ``stride`` s the chain visits steps s-1, 2s-1, ..., T-1 using the
    respaced betas ``1 - alpha_bar[t] / alpha_bar[t_prev]``.
    """
    if n < 1:
        raise BadRange("need at least one sample")
    total = sched.num_steps
    stride = stride or 1
    if stride < 1 or total % stride:
        raise BadRange(f"stride {stride} must divide {total}")
    steps = np.arange(stride - 1, total, stride)
    ab = sched.alpha_bar[steps]
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    beta = 1.0 - ab / ab_prev

    dtype = tn.get_default_dtype()
    x = rng.standard_normal((n,) + tuple(shape)).astype(dtype)
    with tn.no_grad():
        for i in range(len(steps) - 1, -1, -1):
            eps = model(tn.Tensor(x), np.full(n, steps[i])).data
            mean = (x - beta[i] / np.sqrt(1.0 - ab[i]) * eps) / np.sqrt(1.0 - beta[i])
            if i > 0:
                mean = mean + np.sqrt(beta[i]) * rng.standard_normal(x.shape)
            x = mean.astype(dtype)
    return np.clip(x, -1.0, 1.0)


class AdamW:
    """Adam with decoupled weight decay over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            # params are replaced, never mutated, so tapes holding the old data stay valid
            p.data = (p.data * (1.0 - self.lr * self.weight_decay)
                      - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
