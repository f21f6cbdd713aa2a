import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demnet.optimizer import AdamState, adam_step


def test_first_step_hand_derived():
    p, s = adam_step({"w": np.zeros(1)}, {"w": np.ones(1)}, AdamState.fresh({"w": np.zeros(1)}))
    assert abs(p["w"][0] - (-0.001 / (1 + 1e-8))) < 1e-12
    assert s.t == 1
    assert s.m["w"][0] == pytest.approx(0.1)
    assert s.v["w"][0] == pytest.approx(0.001)


def test_zero_gradient_is_noop():
    w = np.array([1.5, -2.0])
    p, s = adam_step({"w": w}, {"w": np.zeros(2)}, AdamState.fresh({"w": w}))
    np.testing.assert_array_equal(p["w"], w)
    assert s.t == 1


def test_inputs_untouched():
    w = np.array([1.0])
    st0 = AdamState.fresh({"w": w})
    adam_step({"w": w}, {"w": np.array([3.0])}, st0)
    assert w[0] == 1.0 and st0.t == 0 and st0.m["w"][0] == 0.0


@settings(max_examples=50, deadline=None)
@given(g=st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
def test_first_step_magnitude_is_lr(g):
    # after bias correction the first update is -lr * g / (|g| + eps)
    p, _ = adam_step({"w": np.zeros(1)}, {"w": np.array([g])}, AdamState.fresh({"w": np.zeros(1)}))
    assert p["w"][0] == pytest.approx(-1e-3 * g / (abs(g) + 1e-8), rel=1e-9)


def test_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(4)
    ref_w, m, v = w.copy(), np.zeros(4), np.zeros(4)
    params, state = {"w": w}, AdamState.fresh({"w": w}, lr=0.01)
    for t in range(1, 21):
        g = rng.standard_normal(4)
        params, state = adam_step(params, {"w": g}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref_w = ref_w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], ref_w, rtol=1e-13)


def test_preserves_dtype():
    w = np.ones(3, np.float32)
    p, s = adam_step({"w": w}, {"w": np.ones(3, np.float32)}, AdamState.fresh({"w": w}))
    assert p["w"].dtype == np.float32 and s.m["w"].dtype == np.float32


def test_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState.fresh({"w": np.zeros(2)}))


def test_rejects_key_mismatch():
    with pytest.raises(KeyError):
        adam_step({"w": np.zeros(2)}, {"u": np.zeros(2)}, AdamState.fresh({"w": np.zeros(2)}))


def test_rejects_non_finite_gradient():
    with pytest.raises(FloatingPointError, match="layer/weight"):
        adam_step({"layer/weight": np.zeros(2)}, {"layer/weight": np.array([1.0, np.nan])},
                  AdamState.fresh({"layer/weight": np.zeros(2)}))


def test_rejects_negative_step_counter():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, AdamState(t=-1))
