"""Convolution, batch norm, ReLU: forward oracles and gradient checks."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octdn import nn
from octdn.errors import DegenerateStatisticsError, ShapeError
from octdn.nn import (BNParams, ConvParams, Mode, batchnorm2d, conv2d,
                      conv2d_direct, grad_check, grad_check_scalar, relu)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def delta_kernel(ch):
    """Per-channel centered identity kernel."""
    w = np.zeros((ch, ch, 3, 3))
    for c in range(ch):
        w[c, c, 1, 1] = 1.0
    return ConvParams(weights=w, bias=np.zeros(ch))


class TestConvForward:
    def test_identity_kernel(self):
        x = rand((2, 3, 6, 7), seed=1)
        out = conv2d(x, delta_kernel(3))
        assert np.allclose(out, x, atol=1e-12)

    def test_ones_kernel_hand_example(self):
        x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        p = ConvParams(weights=np.ones((1, 1, 3, 3)), bias=np.zeros(1))
        out = conv2d(x, p)
        assert out[0, 0, 1, 1] == pytest.approx(45.0)
        assert out[0, 0, 0, 0] == pytest.approx(1 + 2 + 4 + 5)

    def test_zero_kernel_constant_bias(self):
        x = rand((1, 2, 4, 4), seed=2)
        p = ConvParams(weights=np.zeros((3, 2, 3, 3)), bias=np.array([1., 2., 3.]))
        out = conv2d(x, p)
        for o in range(3):
            assert np.array_equal(out[0, o], np.full((4, 4), p.bias[o]))

    def test_matches_direct_loop_oracle(self):
        rng = np.random.default_rng(5)
        for n, ci, co, h, w in [(1, 1, 1, 3, 3), (2, 3, 4, 5, 6),
                                (1, 2, 3, 1, 1), (1, 4, 2, 7, 3)]:
            x = rng.standard_normal((n, ci, h, w))
            p = ConvParams(weights=rng.standard_normal((co, ci, 3, 3)),
                           bias=rng.standard_normal(co))
            assert np.allclose(conv2d(x, p), conv2d_direct(x, p), atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(rand((1, 2, 4, 4)), delta_kernel(3))

    @given(st.integers(0, 2 ** 31), st.floats(-2, 2), st.floats(-2, 2))
    @settings(max_examples=30, deadline=None)
    def test_linear_in_input(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 5, 5))
        y = rng.standard_normal((1, 2, 5, 5))
        p = ConvParams(weights=rng.standard_normal((3, 2, 3, 3)),
                       bias=np.zeros(3))
        lhs = conv2d(alpha * x + beta * y, p)
        rhs = alpha * conv2d(x, p) + beta * conv2d(y, p)
        assert np.allclose(lhs, rhs, atol=1e-10)

    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2 ** 31))
    @settings(max_examples=30, deadline=None)
    def test_spatial_size_preserved(self, h, w, seed):
        x = rand((1, 2, h, w), seed=seed)
        p = ConvParams(weights=rand((3, 2, 3, 3), seed=seed + 1),
                       bias=np.zeros(3))
        assert conv2d(x, p).shape == (1, 3, h, w)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ConvParams(weights=np.zeros((1, 1, 2, 2)), bias=np.zeros(1))

    def test_nonfinite_weights_rejected(self):
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            ConvParams(weights=w, bias=np.zeros(1))


class TestBatchNormForward:
    def test_two_value_channel_train(self):
        # mean 2, variance 1: outputs normalize to -1 and +1
        x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
        p = BNParams(gamma=np.ones(1), beta=np.zeros(1),
                     running_mean=np.zeros(1), running_var=np.ones(1),
                     eps=1e-12)
        out = batchnorm2d(x, p, Mode.TRAIN)
        assert np.allclose(out.ravel(), [-1.0, 1.0], atol=1e-9)

    def test_zero_gamma_gives_constant_beta(self):
        x = rand((2, 3, 4, 4), seed=3)
        p = BNParams(gamma=np.zeros(3), beta=np.array([1., -2., 0.5]),
                     running_mean=np.zeros(3), running_var=np.ones(3))
        out = batchnorm2d(x, p, Mode.TRAIN)
        for c in range(3):
            assert np.allclose(out[:, c], p.beta[c], atol=1e-12)

    def test_infer_standard_normal_stats_is_identity(self):
        x = rand((2, 2, 3, 3), seed=4)
        p = BNParams(gamma=np.ones(2), beta=np.zeros(2),
                     running_mean=np.zeros(2), running_var=np.ones(2),
                     eps=1e-12)
        out = batchnorm2d(x, p, Mode.INFER)
        assert np.allclose(out, x, atol=1e-9)

    def test_train_normalizes_batch(self):
        x = rand((4, 3, 5, 5), seed=5) * 3.0 + 1.5
        p = BNParams(gamma=np.ones(3), beta=np.zeros(3),
                     running_mean=np.zeros(3), running_var=np.ones(3),
                     eps=1e-10)
        out = batchnorm2d(x, p, Mode.TRAIN)
        for c in range(3):
            vals = out[:, c]
            assert abs(vals.mean()) <= 1e-8
            assert abs(vals.var() - 1.0) <= 1e-6

    def test_running_stats_update_rule(self):
        x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
        p = BNParams(gamma=np.ones(1), beta=np.zeros(1),
                     running_mean=np.full(1, 10.0), running_var=np.full(1, 4.0),
                     momentum=0.9)
        batchnorm2d(x, p, Mode.TRAIN)
        # running = momentum * running + (1 - momentum) * batch
        assert p.running_mean[0] == pytest.approx(0.9 * 10.0 + 0.1 * 2.0,
                                                  abs=1e-12)
        assert p.running_var[0] == pytest.approx(0.9 * 4.0 + 0.1 * 1.0,
                                                 abs=1e-12)

    def test_infer_mutates_nothing(self):
        x = rand((2, 1, 3, 3), seed=6)
        p = BNParams(gamma=np.ones(1), beta=np.zeros(1),
                     running_mean=np.full(1, 0.5), running_var=np.full(1, 2.0))
        batchnorm2d(x, p, Mode.INFER)
        assert p.running_mean[0] == 0.5
        assert p.running_var[0] == 2.0

    def test_single_element_batch_degenerate(self):
        x = np.ones((1, 2, 1, 1))
        p = BNParams(gamma=np.ones(2), beta=np.zeros(2),
                     running_mean=np.zeros(2), running_var=np.ones(2))
        with pytest.raises(DegenerateStatisticsError):
            batchnorm2d(x, p, Mode.TRAIN)

    def test_negative_running_var_rejected(self):
        with pytest.raises(ValueError):
            BNParams(gamma=np.ones(1), beta=np.zeros(1),
                     running_mean=np.zeros(1), running_var=np.full(1, -1.0))


class TestRelu:
    def test_hand_example(self):
        x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
        assert np.array_equal(relu(x).ravel(), [0.0, 0.0, 2.0])

    def test_identity_on_nonnegative(self):
        x = np.abs(rand((2, 2, 3, 3), seed=7))
        assert np.array_equal(relu(x), x)

    @given(st.integers(0, 2 ** 31))
    @settings(max_examples=30, deadline=None)
    def test_idempotent(self, seed):
        x = rand((1, 2, 4, 4), seed=seed)
        once = relu(x)
        assert np.array_equal(relu(once), once)

    def test_backward_subgradient_zero_at_zero(self):
        layer = nn.ReLU()
        x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
        layer.forward(x, Mode.TRAIN)
        gx = layer.backward(np.ones_like(x))
        assert np.array_equal(gx.ravel(), [0.0, 0.0, 1.0])


class TestGradCheck:
    def test_linear_op_machine_level(self):
        x = rand((1, 1, 4, 4), seed=8)

        def loss_fn():
            return float(np.sum((2.0 * x) ** 2))

        def grads_fn():
            return [8.0 * x]  # d/dx sum((2x)^2) = 8x

        report = grad_check_scalar(loss_fn, [("x", x)], grads_fn,
                                   tolerance=1e-9)
        assert report.passed
        assert report.max_rel_err < 1e-9

    def test_conv_layer(self):
        # engine layers run channels-last: (n, h, w, c)
        layer = nn.Conv2d(2, 3, rng=np.random.default_rng(0))
        report = grad_check(layer, rand((1, 5, 5, 2), seed=9))
        assert report.passed, str(report)
        assert report.max_rel_err <= 1e-4

    def test_batchnorm_layer_train(self):
        layer = nn.BatchNorm2d(3)
        layer.gamma[:] = [0.7, 1.3, 1.0]
        layer.beta[:] = [0.1, -0.2, 0.0]
        report = grad_check(layer, rand((2, 4, 4, 3), seed=10))
        assert report.passed, str(report)
        assert report.max_rel_err <= 1e-4

    def test_relu_layer(self):
        report = grad_check(nn.ReLU(), rand((2, 4, 4, 2), seed=11) + 0.05)
        assert report.passed, str(report)

    def test_nonfinite_gradient_fails_with_location(self):
        x = np.ones((1, 1, 2, 2))

        def loss_fn():
            return float(np.sum(x ** 2))

        def grads_fn():
            g = 2.0 * x
            g[0, 0, 1, 1] = np.nan
            return [g]

        report = grad_check_scalar(loss_fn, [("x", x)], grads_fn)
        assert not report.passed
        assert any("(0, 0, 1, 1)" in f for f in report.failures)


class TestPrecisionAgreement:
    def test_conv_f32_matches_f64_forward(self):
        rng = np.random.default_rng(12)
        x64 = rng.standard_normal((2, 8, 8, 3))  # channels-last engine layout
        w64 = rng.standard_normal((4, 3, 3, 3)) * 0.2
        b64 = rng.standard_normal(4) * 0.1
        p64 = ConvParams(weights=w64, bias=b64)
        p32 = ConvParams(weights=w64.copy(), bias=b64.copy())
        l64 = nn.Conv2d.from_params(p64, dtype=np.float64)
        l32 = nn.Conv2d.from_params(p32, dtype=np.float32)
        y64 = l64.forward(x64, Mode.INFER)
        y32 = l32.forward(x64.astype(np.float32), Mode.INFER)
        denom = np.maximum(np.abs(y64), 1.0)
        assert (np.abs(y32.astype(np.float64) - y64) / denom).max() <= 1e-4

    def test_batchnorm_f32_matches_f64_forward(self):
        rng = np.random.default_rng(13)
        x64 = rng.standard_normal((2, 6, 6, 3))
        p = BNParams(gamma=np.array([0.5, 1.0, 2.0]),
                     beta=np.array([0.0, 0.1, -0.1]),
                     running_mean=np.zeros(3), running_var=np.ones(3))
        l64 = nn.BatchNorm2d.from_params(p, dtype=np.float64)
        l32 = nn.BatchNorm2d.from_params(p, dtype=np.float32)
        y64 = l64.forward(x64, Mode.TRAIN)
        y32 = l32.forward(x64.astype(np.float32), Mode.TRAIN)
        denom = np.maximum(np.abs(y64), 1.0)
        assert (np.abs(y32.astype(np.float64) - y64) / denom).max() <= 1e-4


class TestInitialization:
    def test_he_fan_in_scaling(self):
        # weight variance should track 2 / (in_ch * k^2)
        layer = nn.Conv2d(64, 64, rng=np.random.default_rng(14))
        expect = 2.0 / (64 * 9)
        assert layer.w.var() == pytest.approx(expect, rel=0.1)
        assert np.array_equal(layer.b, np.zeros(64))

    def test_seeded_determinism(self):
        a = nn.Conv2d(3, 4, rng=np.random.default_rng(99))
        b = nn.Conv2d(3, 4, rng=np.random.default_rng(99))
        assert np.array_equal(a.w, b.w)
