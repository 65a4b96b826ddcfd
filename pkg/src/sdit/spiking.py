"""Leaky integrate-and-fire neurons trained through an arctangent surrogate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadParam, StateShapeMismatch
from .tensor import Tensor, _from_array, primitive


@dataclass(frozen=True)
class LifConfig:
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    surrogate_alpha: float = 2.0
    detach_reset: bool = True
    # Emit the smooth arctan primitive instead of hard spikes. Only for
    # gradient checking: finite differences of a step function are useless,
    # but those of the primitive match the surrogate derivative exactly.
    smooth: bool = False

    def __post_init__(self):
        if not self.tau > 1.0:
            raise BadParam(f"tau must be > 1, got {self.tau}")
        if not self.v_threshold > self.v_reset:
            raise BadParam("v_threshold must exceed v_reset")
        if not self.surrogate_alpha > 0:
            raise BadParam("surrogate_alpha must be positive")


@dataclass
class LifState:
    v: Tensor | None = None
    step_index: int = 0

    def reset(self, cfg: LifConfig | None = None) -> None:
        reset_state(self, cfg or LifConfig())


def surrogate_grad(u, alpha: float = 2.0) -> np.ndarray:
    """Arctangent surrogate for the Heaviside derivative; integrates to 1."""
    u = np.asarray(u)
    return alpha / (2.0 * (1.0 + (0.5 * math.pi * alpha * u) ** 2))


def surrogate_primitive(u, alpha: float = 2.0) -> np.ndarray:
    """Antiderivative of :func:`surrogate_grad`, a smooth step from 0 to 1."""
    return np.arctan(0.5 * math.pi * alpha * np.asarray(u)) / math.pi + 0.5


def spike(u: Tensor, alpha: float = 2.0, smooth: bool = False) -> Tensor:
    """Heaviside(u) forward, surrogate derivative backward."""
    if smooth:
        out = surrogate_primitive(u.data, alpha).astype(u.dtype)
    else:
        out = (u.data >= 0).astype(u.dtype)
    return primitive(out, (u,), lambda g: (g * surrogate_grad(u.data, alpha),), "spike")


def lif_step(x: Tensor, state: LifState, cfg: LifConfig) -> Tensor:
    """Charge, fire, hard-reset. Mutates ``state`` and returns the spikes."""
    if state.v is None:
        v = _from_array(np.full(x.shape, cfg.v_reset, dtype=x.dtype))
    elif state.v.shape != x.shape:
        raise StateShapeMismatch(f"state {state.v.shape} vs input {x.shape}")
    else:
        v = state.v

    h = v + (x - (v - cfg.v_reset)) * (1.0 / cfg.tau)
    s = spike(h - cfg.v_threshold, cfg.surrogate_alpha, cfg.smooth)
    gate = s.detach() if cfg.detach_reset else s
    state.v = h * (1.0 - gate) + gate * cfg.v_reset
    state.step_index += 1
    return s


def reset_state(state: LifState, cfg: LifConfig) -> None:
    if state.v is not None:
        state.v = _from_array(np.full(state.v.shape, cfg.v_reset, dtype=state.v.dtype))
    state.step_index = 0
