"""LAMB optimizer and learning-rate schedule against hand-computed oracles."""

import numpy as np
import pytest

from objattn import numerics as nm
from objattn.optim import (NumericFailure, OptState, Schedule, _no_decay,
                           lamb_step, lr_at)


def test_lr_schedule_exact_endpoints():
    s = Schedule(max_lr=2e-3, warmup_steps=4000, final_lr=2e-7,
                 decay_steps=200_000)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 4000) == 2e-3
    assert lr_at(s, 200_000) == 2e-7
    assert lr_at(s, 300_000) == 2e-7
    assert lr_at(s, 2000) == 1e-3
    mid = (4000 + 200_000) // 2
    assert abs(lr_at(s, mid) - (2e-3 + 2e-7) / 2) < 1e-12


def test_lr_schedule_validation():
    with pytest.raises(ValueError):
        lr_at(Schedule(warmup_steps=100, decay_steps=50), 0)
    with pytest.raises(ValueError):
        lr_at(Schedule(), -1)


def hand_lamb_scalar(w, g, lr, steps, wd=0.0, b1=0.9, b2=0.999, eps=1e-6,
                     tmin=0.01, tmax=10.0):
    """Independent scalar LAMB oracle (plain Python floats)."""
    import math
    m = v = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        u = m_hat / (math.sqrt(v_hat) + eps) + wd * w
        un = abs(u)
        if un > 0:
            r = min(max(abs(w), tmin), tmax) / (un + 1e-12)
        else:
            r = 1.0
        w = w - lr * r * u
    return w


@pytest.mark.parametrize("wd,steps", [(0.0, 1), (0.0, 3), (0.01, 1),
                                      (0.01, 5)])
def test_lamb_matches_scalar_oracle(wd, steps):
    with nm.use_dtype("float64"):
        w0, g0, lr = 0.7, 0.3, 1e-2
        params = {"fc.w": nm.parameter(np.array(w0), name="fc.w")}
        state = OptState(weight_decay=wd)
        for _ in range(steps):
            lamb_step(params, {"fc.w": np.array(g0)}, state, lr)
        expect = hand_lamb_scalar(w0, g0, lr, steps, wd=wd)
        assert abs(float(params["fc.w"].data) - expect) < 1e-10


def test_lamb_trust_ratio_clamps():
    with nm.use_dtype("float64"):
        # giant weight norm: trust ratio caps at 10
        params = {"fc.w": nm.parameter(np.array(100.0), name="fc.w")}
        state = OptState(weight_decay=0.0)
        lamb_step(params, {"fc.w": np.array(1.0)}, state, lr=1.0)
        # update u -> 1.0 after bias correction; r = clamp(100)=10
        assert abs(float(params["fc.w"].data) - (100.0 - 10.0)) < 1e-6


def test_lamb_force_trust_one_is_adamw():
    with nm.use_dtype("float64"):
        params = {"fc.w": nm.parameter(np.array(0.7), name="fc.w")}
        state = OptState(weight_decay=0.0)
        lamb_step(params, {"fc.w": np.array(0.3)}, state, lr=1e-2,
                  force_trust_one=True)
        # one bias-corrected Adam step: u = m_hat/(sqrt(v_hat)+eps) ~ 1
        expect = 0.7 - 1e-2 * (0.3 / (0.3 + 1e-6))
        assert abs(float(params["fc.w"].data) - expect) < 1e-12


def test_no_decay_rule():
    assert _no_decay("layer0.ln1.b")
    assert _no_decay("layer0.ln1.g")
    assert _no_decay("layer3.attn.u")
    assert _no_decay("layer3.attn.v")
    assert not _no_decay("layer0.attn.wq")
    assert not _no_decay("head.desc.fc1.w")


def test_decay_skipped_for_bias():
    with nm.use_dtype("float64"):
        params = {"fc.b": nm.parameter(np.array(0.5), name="fc.b"),
                  "fc.w": nm.parameter(np.array(0.5), name="fc.w")}
        state = OptState(weight_decay=0.5)
        g = {"fc.b": np.array(0.1), "fc.w": np.array(0.1)}
        lamb_step(params, g, state, lr=1e-3)
        # same gradient, but the weight also feels decay -> bigger move
        assert params["fc.b"].data > params["fc.w"].data


def test_nan_gradient_aborts_step():
    params = {"fc.w": nm.parameter(np.array(1.0), name="fc.w")}
    state = OptState()
    with pytest.raises(NumericFailure):
        lamb_step(params, {"fc.w": np.array(np.nan)}, state, 1e-3)
    assert float(params["fc.w"].data) == 1.0    # untouched
    assert state.step == 0


def test_zero_gradient_with_decay_still_moves():
    with nm.use_dtype("float64"):
        params = {"fc.w": nm.parameter(np.array(2.0), name="fc.w")}
        state = OptState(weight_decay=0.01)
        lamb_step(params, {"fc.w": np.array(0.0)}, state, 1e-2)
        assert float(params["fc.w"].data) != 2.0


def test_state_tracks_moments_per_tensor():
    params = {"a": nm.parameter(np.ones(3), name="a"),
              "b": nm.parameter(np.ones(2), name="b")}
    state = OptState()
    lamb_step(params, {"a": np.ones(3)}, state, 1e-3)
    assert "a" in state.m and "b" not in state.m
    lamb_step(params, {"a": np.ones(3), "b": np.ones(2)}, state, 1e-3)
    assert state.m["b"].shape == (2,)
    assert state.step == 2
