import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from sdit import tensor as tn
from sdit.errors import BadParam, StateShapeMismatch
from sdit.spiking import LifConfig, LifState, lif_step, reset_state, surrogate_grad

pytestmark = pytest.mark.usefixtures("f64")
CFG = LifConfig()


def test_config_validation():
    with pytest.raises(BadParam):
        LifConfig(tau=1.0)
    with pytest.raises(BadParam):
        LifConfig(v_threshold=0.0, v_reset=0.0)


def test_zero_input_stays_silent():
    st_ = LifState()
    for _ in range(4):
        assert not lif_step(tn.zeros((2, 3)), st_, CFG).data.any()
        assert np.all(st_.v.data == 0.0)


def test_fires_and_resets():
    st_ = LifState()
    s = lif_step(tn.tensor([2.0]), st_, CFG)
    assert s.data[0] == 1.0 and st_.v.data[0] == 0.0 and st_.step_index == 1


def test_subthreshold_trace():
    st_ = LifState()
    assert lif_step(tn.tensor([0.8]), st_, CFG).data[0] == 0.0
    assert abs(st_.v.data[0] - 0.4) < 1e-12
    assert lif_step(tn.tensor([0.8]), st_, CFG).data[0] == 0.0
    assert abs(st_.v.data[0] - 0.6) < 1e-12


def test_state_shape_mismatch():
    st_ = LifState()
    lif_step(tn.zeros((2,)), st_, CFG)
    with pytest.raises(StateShapeMismatch):
        lif_step(tn.zeros((3,)), st_, CFG)


@given(arrays(np.float64, (4, 6), elements=st.floats(-5, 5)), st.integers(1, 8))
def test_spikes_binary_and_membrane_below_threshold(x, steps):
    st_ = LifState()
    for _ in range(steps):
        s = lif_step(tn.tensor(x), st_, CFG).data
        assert np.all((s == 0.0) | (s == 1.0))
        assert np.all(st_.v.data < CFG.v_threshold)


@given(st.integers(1, 8))
def test_zero_input_zero_spikes_any_T(steps):
    st_ = LifState()
    assert all(not lif_step(tn.zeros((5,)), st_, CFG).data.any() for _ in range(steps))


def test_surrogate_examples():
    assert surrogate_grad(0.0, 2.0) == 1.0
    u = np.random.default_rng(0).normal(size=50)
    assert np.array_equal(surrogate_grad(u), surrogate_grad(-u))
    area, _ = quad(lambda u: surrogate_grad(u, 2.0), -np.inf, np.inf)
    assert abs(area - 1.0) < 0.01
    grid = np.linspace(-500, 500, 2_000_001)
    assert abs(np.trapezoid(surrogate_grad(grid), grid) - 1.0) < 0.01


@given(st.floats(-3, 3), st.floats(0.1, 8))
def test_surrogate_positive_even_peaked(u, alpha):
    g = surrogate_grad(u, alpha)
    assert g > 0 and g == surrogate_grad(-u, alpha) and g <= surrogate_grad(0.0, alpha)


@given(st.floats(-3, 3), st.floats(-1.0, 0.9))
def test_lif_gradient_matches_manual_chain_rule(x, v0):
    """d spike / d x = g(H - v_th) * dH/dx with dH/dx = 1/tau."""
    st_ = LifState(v=tn.tensor([v0]))
    xt = tn.parameter([x])
    tn.backward(lif_step(xt, st_, CFG).sum())
    h = v0 + (x - (v0 - CFG.v_reset)) / CFG.tau
    expected = surrogate_grad(h - CFG.v_threshold, CFG.surrogate_alpha) / CFG.tau
    assert math.isclose(xt.grad[0], expected, rel_tol=1e-12, abs_tol=1e-300)


def test_detach_reset_cuts_reset_path():
    """Two steps: with detach the second spike's x-gradient skips the reset product."""
    def grads(detach):
        cfg = dataclasses.replace(CFG, detach_reset=detach)
        st_, x = LifState(), tn.parameter([1.5])
        lif_step(x, st_, cfg)
        tn.backward(lif_step(x, st_, cfg).sum())
        return x.grad[0]

    assert grads(True) != grads(False)


def test_smooth_mode_gradcheck(rng):
    cfg = dataclasses.replace(CFG, smooth=True, detach_reset=False)

    def f(x):
        st_ = LifState()
        return sum((lif_step(x, st_, cfg) for _ in range(3)), tn.zeros((4,))).sum()

    rep = tn.grad_check(f, tn.tensor(rng.normal(1.0, 1.0, 4)), h=1e-6, tol=1e-5)
    assert rep.passed, rep


def test_reset_state():
    st_ = LifState()
    lif_step(tn.tensor([0.8, 3.0]), st_, CFG)
    reset_state(st_, CFG)
    assert np.all(st_.v.data == CFG.v_reset) and st_.step_index == 0
    assert not lif_step(tn.zeros((2,)), st_, CFG).data.any()


def _run(x, st_, steps=3):
    return [lif_step(x, st_, CFG).data.copy() for _ in range(steps)]


def test_reset_makes_passes_repeatable():
    x = tn.tensor([0.7, 1.3, 2.5])
    st_ = LifState()
    first = _run(x, st_)
    reset_state(st_, CFG)
    assert all(np.array_equal(a, b) for a, b in zip(first, _run(x, st_)))


def test_skipping_reset_leaks_state():
    x = tn.tensor([1.5])  # fires on step 2, ends the pass charged at 0.75
    st_ = LifState()
    first = _run(x, st_)
    assert any(a.any() for a in first)
    assert not all(np.array_equal(a, b) for a, b in zip(first, _run(x, st_)))
