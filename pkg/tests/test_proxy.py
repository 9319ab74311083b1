import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from approxtrain.proxy import (
    AnalogAct,
    ScAct,
    SplitOutput,
    analog_act,
    analog_act_grad,
    sc_act,
    sc_act_grad,
    split_forward,
)
from approxtrain.sc import expected_or
from approxtrain.tensor.functional import conv2d_exact, linear_exact
from oracles import numeric_grad, rel_err

nonneg = st.floats(0, 20, allow_nan=False)


class TestSplit:
    def test_positive_weights(self, rng):
        x = rng.uniform(size=(1, 2, 5, 5))
        w = rng.uniform(size=(3, 2, 3, 3))
        s = split_forward(x, w, pad=1)
        assert not s.x_neg.any()
        np.testing.assert_allclose(s.x_pos - s.x_neg, conv2d_exact(x, w, None, 1, 1), atol=1e-5)

    def test_swap_symmetry(self, rng):
        x = rng.uniform(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        a, b = split_forward(x, w), split_forward(x, -w)
        np.testing.assert_array_equal(a.x_pos, b.x_neg)
        np.testing.assert_array_equal(a.x_neg, b.x_pos)

    def test_difference_is_exact_conv(self, rng):
        x = rng.uniform(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        s = split_forward(x, w, pad=1)
        np.testing.assert_allclose(s.x_pos - s.x_neg, conv2d_exact(x, w, None, 1, 1), atol=1e-5)
        sl = split_forward(x.reshape(2, -1), rng.normal(size=(5, 108)), kind="linear")
        assert sl.x_pos.shape == (2, 5)

    def test_linear_difference(self, rng):
        x, w = rng.uniform(size=(3, 8)), rng.normal(size=(4, 8))
        s = split_forward(x, w, kind="linear")
        np.testing.assert_allclose(s.x_pos - s.x_neg, linear_exact(x, w), atol=1e-5)

    def test_negative_input_rejected(self):
        with pytest.raises(ValueError):
            split_forward(-np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        with pytest.raises(ValueError):
            SplitOutput(np.ones(2), np.ones(3))


class TestScAct:
    def test_examples(self):
        assert sc_act(0.0, 0.0) == 0.0
        assert sc_act(1.0, 0.0) == pytest.approx(1 - math.exp(-1))
        assert sc_act(1.0, 0.0) == pytest.approx(0.63212, abs=1e-5)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            sc_act(-0.1, 0.0)

    def test_gradient_fd(self, rng):
        for _ in range(20):
            xp, xn = rng.uniform(0, 4, 16), rng.uniform(0, 4, 16)
            gp, gn = sc_act_grad(xp, xn)
            num_p = numeric_grad(lambda v: float(((1 - np.exp(-v)) - (1 - np.exp(-xn))).sum()), xp.copy(), 1e-5)
            num_n = numeric_grad(lambda v: float(((1 - np.exp(-xp)) - (1 - np.exp(-v))).sum()), xn.copy(), 1e-5)
            assert rel_err(gp, num_p) <= 1e-4 and rel_err(gn, num_n) <= 1e-4

    @given(nonneg, nonneg)
    def test_odd_bounded_monotone(self, a, b):
        assert sc_act(a, b) == pytest.approx(-sc_act(b, a))
        assert -1 <= sc_act(a, b) <= 1
        assert sc_act(a + 0.5, b) >= sc_act(a, b) and sc_act(a, b + 0.5) <= sc_act(a, b)

    @given(st.integers(1, 5), st.floats(0, 1))
    def test_tracks_expected_or_for_small_inputs(self, n, frac):
        a = frac * 0.1 / n
        assert abs(sc_act(n * a, 0.0) - expected_or([a] * n)) <= 0.01

    def test_pointwise_fn_matches(self, rng):
        xp, xn = rng.uniform(0, 2, 10).astype(np.float32), rng.uniform(0, 2, 10).astype(np.float32)
        np.testing.assert_allclose(ScAct()(xp, xn), sc_act(xp, xn), rtol=1e-6)


class TestAnalogAct:
    def test_examples(self):
        assert analog_act(0.5, 1.0, 0.0) == 0.5
        assert analog_act(3.0, 2.0, 0.0) == 2.0

    def test_boundary_gradient_is_zero(self):
        gp, gn = analog_act_grad(np.array([2.0]), 2.0, np.array([2.0]))
        assert gp[0] == 0 and gn[0] == 0

    def test_gradient_fd_away_from_kink(self, rng):
        clip = 1.3
        for _ in range(20):
            xp, xn = rng.uniform(0, 3, 16), rng.uniform(0, 3, 16)
            xp[np.abs(xp - clip) < 1e-2] += 0.05
            xn[np.abs(xn - clip) < 1e-2] += 0.05
            gp, gn = analog_act_grad(xp, clip, xn)
            num_p = numeric_grad(lambda v: float((np.minimum(v, clip) - np.minimum(xn, clip)).sum()), xp.copy(), 1e-5)
            num_n = numeric_grad(lambda v: float((np.minimum(xp, clip) - np.minimum(v, clip)).sum()), xn.copy(), 1e-5)
            assert rel_err(gp, num_p) <= 1e-4 and rel_err(gn, num_n) <= 1e-4

    @given(nonneg, nonneg, st.floats(0.1, 5))
    def test_odd_bounded_monotone(self, a, b, clip):
        assert analog_act(a, clip, b) == -analog_act(b, clip, a)
        assert -clip <= analog_act(a, clip, b) <= clip
        assert analog_act(a + 0.5, clip, b) >= analog_act(a, clip, b)

    def test_per_polarity_clip(self):
        np.testing.assert_allclose(AnalogAct((2.0, 0.5))(np.array([3.0]), np.array([3.0])), [1.5])
