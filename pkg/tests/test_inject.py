import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from approxtrain import counters
from approxtrain.inject import (
    ErrorModelType1,
    ErrorModelType2,
    InjectionKey,
    InjectType1,
    calibrate_type1,
    calibrate_type2,
    inject_type1,
    inject_type2,
    polyfit,
    polyval,
)
from approxtrain.model import ForwardContext, MethodConfig, TinyConv
from approxtrain.tensor.autograd import Tensor
from oracles import two_pass_mean_var

KEY = InjectionKey(7, 2, 13)


class TestPolyfit:
    def test_line(self):
        x = np.linspace(-2, 3, 20)
        np.testing.assert_allclose(polyfit(x, 2 * x + 1, 1), [1, 2], atol=1e-6)

    def test_degree_zero_is_mean(self, rng):
        y = rng.normal(size=30)
        assert polyfit(rng.normal(size=30), y, 0)[0] == pytest.approx(y.mean(), abs=1e-8)

    def test_matches_numpy_least_squares(self, rng):
        x, y = rng.uniform(-1, 2, 50), rng.normal(size=50)
        ref = np.polynomial.polynomial.polyfit(x, y, 3)
        np.testing.assert_allclose(polyfit(x, y, 3), ref, atol=1e-6)

    def test_noisy_cubic_within_three_standard_errors(self):
        rng = np.random.default_rng(4)
        true = np.array([0.3, -1.0, 0.5, 0.25])
        x = rng.uniform(-2, 2, 400)
        sigma = 0.1
        y = polyval(true, x) + rng.normal(0, sigma, x.size)
        vander = x[:, None] ** np.arange(4)
        se = sigma * np.sqrt(np.diag(np.linalg.inv(vander.T @ vander)))
        assert (np.abs(polyfit(x, y, 3) - true) <= 3 * se).all()

    def test_degenerate(self):
        with pytest.raises(ValueError, match="equal"):
            polyfit(np.ones(5), np.arange(5), 1)
        with pytest.raises(ValueError, match="points"):
            polyfit(np.arange(3), np.arange(3), 3)


class TestType1:
    def test_zero_error(self, rng):
        y = rng.normal(size=5000)
        m = calibrate_type1(y, y)
        assert np.abs(m.mean_poly).max() <= 1e-4 and np.abs(m.std_poly).max() <= 1e-4

    def test_recovers_synthetic_error(self):
        rng = np.random.default_rng(8)
        y = rng.uniform(-1, 1, 200_000)
        acc = y + 0.1 * y + rng.normal(0, 0.05, y.size)
        m = calibrate_type1(acc, y)
        assert m.mean_poly[1] == pytest.approx(0.1, abs=0.02)
        grid = np.linspace(-0.95, 0.95, 11)
        np.testing.assert_allclose(m.std(grid), 0.05, atol=0.02)

    def test_single_bin_falls_back_to_degree_zero(self):
        m = calibrate_type1(np.array([1.0, 1.2, 0.8]), np.zeros(3))
        assert m.mean_poly.shape == (1,) and m.mean_poly[0] == pytest.approx(1.0)

    def test_deterministic(self, rng):
        y, acc = rng.normal(size=1000), rng.normal(size=1000)
        a, b = calibrate_type1(acc, y), calibrate_type1(acc, y)
        np.testing.assert_array_equal(a.mean_poly, b.mean_poly)
        np.testing.assert_array_equal(a.std_poly, b.std_poly)

    def test_zero_polynomials_identity(self, rng):
        y = rng.normal(size=100).astype(np.float32)
        m = ErrorModelType1(np.zeros(4), np.zeros(4), -5, 5)
        np.testing.assert_array_equal(inject_type1(y, m, KEY), y)

    def test_constant_mean_shift(self, rng):
        y = rng.normal(size=100).astype(np.float32)
        m = ErrorModelType1(np.array([0.25]), np.zeros(1), -5, 5)
        np.testing.assert_allclose(inject_type1(y, m, KEY), y + 0.25, rtol=1e-6)

    def test_noise_statistics_at_evaluation_points(self):
        m = ErrorModelType1(np.array([0.1, -0.2, 0.05]), np.array([0.2, 0.1]), -1.0, 1.0)
        for v in (-0.8, 0.0, 0.6):
            y = np.full(100_000, v)
            noise = inject_type1(y, m, InjectionKey(3, 1, int(v * 10) + 20)).astype(np.float64) - y
            mu, sd = float(m.mean(v)), float(m.std(v))
            assert abs(noise.mean() - mu) <= 0.01 * sd
            assert abs(noise.std() / sd - 1) <= 0.01

    def test_domain_clamped(self):
        m = ErrorModelType1(np.array([0.0, 1.0]), np.zeros(1), -1.0, 1.0)
        assert inject_type1(np.array([5.0]), m, KEY)[0] == pytest.approx(6.0)

    def test_missing_model(self):
        with pytest.raises(RuntimeError, match="calibrated"):
            inject_type1(np.zeros(3), None, KEY)
        with pytest.raises(RuntimeError):
            InjectType1(None, KEY)

    @settings(max_examples=30)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50), st.integers(0, 2**20))
    def test_finite_outputs(self, ys, batch):
        m = ErrorModelType1(np.array([0.1, 0.01, -0.001, 1e-4]), np.array([0.05, 0.01]), -10, 10)
        assert np.isfinite(inject_type1(np.array(ys), m, InjectionKey(0, 0, batch))).all()


class TestType2:
    def test_pm_one(self):
        m = calibrate_type2(np.array([-1.0, 1.0]), np.zeros(2))
        assert (m.mean, m.var) == (0.0, 1.0)

    def test_zero_error(self, rng):
        y = rng.normal(size=(4, 5))
        m = calibrate_type2(y, y)
        assert abs(m.mean) <= 1e-6 and m.var <= 1e-6

    def test_random_layer_matches_two_pass(self, rng):
        model = TinyConv(1, 8, 10, (4, 4, 8), seed=3)
        x = rng.uniform(size=(8, 1, 8, 8)).astype(np.float32)
        ctx = ForwardContext("analog", "inject", MethodConfig(), calibrate_type2=True, refresh_scales=True)
        model.forward(Tensor(x), ctx)
        layer = model.layers[0]
        gp, gn = layer.group_sums(x, MethodConfig())
        exact = (gp.astype(np.float64) - gn).sum(axis=2)
        mean, var = two_pass_mean_var(layer.accurate(x, "analog", MethodConfig()).astype(np.float64) - exact)
        assert layer.state.type2.mean == pytest.approx(mean, abs=1e-6)
        assert layer.state.type2.var == pytest.approx(var, abs=1e-6)

    def test_identity_and_shift(self, rng):
        y = rng.normal(size=50).astype(np.float32)
        np.testing.assert_array_equal(inject_type2(y, ErrorModelType2(0.0, 0.0), KEY), y)
        np.testing.assert_allclose(inject_type2(y, ErrorModelType2(0.5, 0.0), KEY), y + 0.5, rtol=1e-6)

    def test_noise_statistics(self):
        m = ErrorModelType2(0.3, 0.04)
        noise = inject_type2(np.zeros(100_000), m, KEY).astype(np.float64)
        assert abs(noise.mean() - 0.3) <= 0.02 * 0.3
        assert abs(noise.var() / 0.04 - 1) <= 0.02

    def test_negative_variance_and_missing_model(self):
        with pytest.raises(ValueError):
            ErrorModelType2(0.0, -1.0)
        with pytest.raises(RuntimeError):
            inject_type2(np.zeros(2), None, KEY)


class TestLayerCalibration:
    def test_exact_table_gives_zero_error_model(self, rng):
        model = TinyConv(1, 8, 10, (4, 4, 8), seed=1)
        cfg = MethodConfig(multiplier="default:0")
        ctx = ForwardContext("approx-mult", "inject", cfg, cfg.table(), calibrate_type1=True)
        model.forward(Tensor(rng.uniform(size=(8, 1, 8, 8))), ctx)
        for layer in model.layers:
            t1 = layer.state.type1
            assert np.abs(t1.mean_poly).max() <= 1e-4 and np.abs(t1.std_poly).max() <= 1e-4

    def test_calibration_counter(self, rng):
        model = TinyConv(1, 8, 10, (4, 4, 8), seed=1)
        ctx = ForwardContext("sc", "inject", MethodConfig(), calibrate_type1=True, refresh_scales=True)
        model.forward(Tensor(rng.uniform(size=(4, 1, 8, 8))), ctx)
        assert counters.snapshot()["type1_calibrations"] == len(model.layers)
