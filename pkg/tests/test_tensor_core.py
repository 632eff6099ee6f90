"""Forward oracles and finite-difference gradient checks for every kernel."""

import numpy as np
import pytest

from softseg import backend
from softseg.errors import NonFiniteGradientError, ShapeError
from softseg.tensor import (AdamState, BatchNorm2d, Conv2d, Deconv2d, ReLU, Sigmoid,
                            Tanh, activation, adam_step, clip_global_norm, grad_check)

FD_H = 1e-3
FD_TOL = 1e-3


def conv_direct(x, w, b, stride, pad):
    """Direct-summation reference for cross-correlation."""
    n, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = float(b[co]) if b is not None else 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy, ix = oy * stride + ky - pad, ox * stride + kx - pad
                                if 0 <= iy < h and 0 <= ix < ww:
                                    acc += float(x[ni, ci, iy, ix]) * float(w[co, ci, ky, kx])
                    out[ni, co, oy, ox] = acc
    return out


def layer_loss_fn(layer, x, train=False):
    """Scalar loss (sum of outputs) through one layer, for grad checks."""
    def run():
        kwargs = {"update_stats": False} if isinstance(layer, BatchNorm2d) else {}
        y = layer.forward(x, train=train, **kwargs)
        loss = float(y.sum(dtype=np.float64))
        gy = np.ones_like(y)
        gx = layer.backward(gy)
        grads = {"x": gx}
        for name, g in getattr(layer, "grads", {}).items():
            grads[name] = g
        return loss, grads
    return run


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
        conv = Conv2d(1, 1, rng=np.random.default_rng(0))
        conv.weight[:] = 0
        conv.weight[0, 0, 1, 1] = 1.0
        conv.bias[:] = 0
        y = conv.forward(x)
        assert np.array_equal(y, x)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_direct_summation(self, rng, stride):
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        conv = Conv2d(2, 3, stride=stride, rng=rng)
        y = conv.forward(x)
        ref = conv_direct(x, conv.weight, conv.bias, stride, 1)
        assert y.shape == ref.shape
        np.testing.assert_allclose(y, ref, atol=1e-5)

    def test_channel_mismatch_raises(self, rng):
        conv = Conv2d(3, 4, rng=rng)
        with pytest.raises(ShapeError):
            conv.forward(np.zeros((1, 2, 4, 4), np.float32))

    def test_odd_size_with_stride_raises(self, rng):
        conv = Conv2d(1, 1, stride=2, rng=rng)
        with pytest.raises(ShapeError):
            conv.forward(np.zeros((1, 1, 5, 5), np.float32))

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients_match_finite_differences(self, rng, stride):
        conv = Conv2d(2, 3, stride=stride, rng=rng)
        conv.weight = conv.weight.astype(np.float64)
        conv.bias = conv.bias.astype(np.float64)
        x = rng.standard_normal((2, 2, 4, 4))
        report = grad_check(layer_loss_fn(conv, x),
                            {"weight": conv.weight, "bias": conv.bias, "x": x}, h=FD_H)
        assert report.max_rel_error < FD_TOL, str(report)


class TestDeconv2d:
    def test_adjoint_identity(self, rng):
        x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        y = rng.standard_normal((1, 5, 2, 2)).astype(np.float32)
        conv = Conv2d(3, 5, stride=2, rng=rng)
        conv.bias[:] = 0
        deconv = Deconv2d(5, 3, stride=2, rng=rng)
        deconv.weight = conv.weight.copy()  # shared kernel, adjoint roles
        deconv.bias[:] = 0
        lhs = float(np.sum(conv.forward(x) * y, dtype=np.float64))
        rhs = float(np.sum(x * deconv.forward(y), dtype=np.float64))
        assert abs(lhs - rhs) < 1e-4

    def test_delta_kernel_places_inputs_on_grid(self, rng):
        x = rng.standard_normal((1, 1, 2, 2)).astype(np.float32)
        deconv = Deconv2d(1, 1, stride=2, rng=rng)
        deconv.weight[:] = 0
        deconv.weight[0, 0, 1, 1] = 1.0
        deconv.bias[:] = 0
        y = deconv.forward(x)
        assert y.shape == (1, 1, 4, 4)
        expected = np.zeros((1, 1, 4, 4), np.float32)
        expected[0, 0, ::2, ::2] = x[0, 0]
        np.testing.assert_array_equal(y, expected)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients_match_finite_differences(self, rng, stride):
        deconv = Deconv2d(3, 2, stride=stride, rng=rng)
        deconv.weight = deconv.weight.astype(np.float64)
        deconv.bias = deconv.bias.astype(np.float64)
        x = rng.standard_normal((2, 3, 4, 4))
        report = grad_check(layer_loss_fn(deconv, x),
                            {"weight": deconv.weight, "bias": deconv.bias, "x": x}, h=FD_H)
        assert report.max_rel_error < FD_TOL, str(report)


class TestBatchNorm:
    def test_constant_input_returns_shift(self, rng):
        bn = BatchNorm2d(3)
        bn.beta = np.array([0.5, -1.0, 2.0], dtype=np.float32)
        x = np.broadcast_to(np.array([1.0, 2.0, 3.0], np.float32)[:, None, None],
                            (3, 4, 4))[None]
        y = bn.forward(np.ascontiguousarray(x), train=True)
        for c, shift in enumerate(bn.beta):
            np.testing.assert_allclose(y[0, c], shift, atol=1e-4)

    def test_train_mode_normalizes(self, rng):
        bn = BatchNorm2d(4)
        x = rng.normal(3.0, 2.5, size=(4, 4, 8, 8)).astype(np.float32)
        y = bn.forward(x, train=True)
        mean = y.mean(axis=(0, 2, 3))
        var = y.var(axis=(0, 2, 3))
        np.testing.assert_allclose(mean, 0, atol=1e-5)
        np.testing.assert_allclose(var, 1, atol=1e-3)

    def test_single_value_per_channel_rejected(self):
        bn = BatchNorm2d(2)
        with pytest.raises(ShapeError):
            bn.forward(np.zeros((1, 2, 1, 1), np.float32), train=True)

    def test_running_stats_updated_and_used(self, rng):
        bn = BatchNorm2d(2)
        x = rng.normal(1.0, 2.0, size=(4, 2, 4, 4)).astype(np.float32)
        before = bn.running_mean.copy()
        bn.forward(x, train=True)
        assert not np.array_equal(bn.running_mean, before)
        y_eval = bn.forward(x, train=False)
        assert y_eval.shape == x.shape

    @pytest.mark.parametrize("train", [True, False])
    def test_gradients_match_finite_differences(self, rng, train):
        bn = BatchNorm2d(3)
        bn.gamma = (1.0 + 0.1 * rng.standard_normal(3))
        bn.beta = 0.1 * rng.standard_normal(3)
        bn.running_var = np.abs(bn.running_var + 0.3 * rng.standard_normal(3).astype(np.float32))
        x = rng.standard_normal((2, 3, 4, 4))
        report = grad_check(layer_loss_fn(bn, x, train=train),
                            {"gamma": bn.gamma, "beta": bn.beta, "x": x}, h=FD_H)
        assert report.max_rel_error < FD_TOL, str(report)


class TestActivations:
    def test_fixed_points(self):
        assert Sigmoid().forward(np.array([0.0]))[0] == pytest.approx(0.5)
        assert Tanh().forward(np.array([0.0]))[0] == 0.0
        x = np.array([-3.0, -0.5, 0.0, 0.5])
        np.testing.assert_array_equal(ReLU().forward(x), [0.0, 0.0, 0.0, 0.5])

    def test_ranges(self, rng):
        x = rng.standard_normal(1000) * 10
        s = Sigmoid().forward(x)
        t = Tanh().forward(x)
        assert np.all((s > 0) & (s < 1))
        assert np.all((t > -1) & (t < 1))

    def test_sigmoid_derivative_at_zero(self):
        sig = Sigmoid()
        x = np.array([0.0])
        sig.forward(x)
        assert sig.backward(np.ones(1))[0] == pytest.approx(0.25)
        fd = (1 / (1 + np.exp(-FD_H)) - 1 / (1 + np.exp(FD_H))) / (2 * FD_H)
        assert fd == pytest.approx(0.25, abs=1e-4)

    @pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh"])
    def test_derivatives_match_finite_differences(self, rng, kind):
        layer = activation(kind)
        # magnitudes bounded away from zero so the relu kink is never straddled
        x = rng.uniform(0.05, 1.5, size=(2, 3, 5, 5)) * rng.choice([-1.0, 1.0], (2, 3, 5, 5))
        report = grad_check(layer_loss_fn(layer, x), {"x": x}, h=FD_H)
        assert report.max_rel_error < 1e-4, str(report)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            activation("gelu")


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.ones(3, np.float32)}
        g = {"w": np.zeros(3, np.float32)}
        state = AdamState(lr=0.1)
        for _ in range(5):
            adam_step(p, g, state)
        np.testing.assert_array_equal(p["w"], np.ones(3, np.float32))

    def test_single_step_hand_computed(self):
        # m_hat = 1, v_hat = 1 after bias correction, so p moves by about -lr
        p = {"w": np.zeros(1, np.float32)}
        g = {"w": np.ones(1, np.float32)}
        state = AdamState(lr=0.1, beta1=0.0, beta2=0.99, epsilon=1e-8)
        adam_step(p, g, state)
        assert p["w"][0] == pytest.approx(-0.1, rel=1e-5)

    def test_deterministic(self):
        def run():
            p = {"w": np.full(4, 0.3, np.float32)}
            state = AdamState(lr=0.01)
            for i in range(10):
                g = {"w": np.full(4, 0.1 * (i + 1), np.float32)}
                adam_step(p, g, state)
            return p["w"]
        np.testing.assert_array_equal(run(), run())

    def test_non_finite_gradient_rejected(self):
        p = {"a": np.ones(2, np.float32), "b": np.ones(2, np.float32)}
        g = {"a": np.zeros(2, np.float32), "b": np.array([1.0, np.nan], np.float32)}
        state = AdamState()
        with pytest.raises(NonFiniteGradientError) as exc:
            adam_step(p, g, state)
        assert exc.value.param_name == "b"
        np.testing.assert_array_equal(p["a"], np.ones(2, np.float32))
        np.testing.assert_array_equal(p["b"], np.ones(2, np.float32))
        assert state.step_count == 0

    def test_clip_global_norm(self):
        g = {"a": np.array([3.0, 4.0], np.float32)}
        norm = clip_global_norm(g, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(g["a"], [0.6, 0.8], rtol=1e-6)


class TestGradCheckHarness:
    def test_linear_map_is_exact(self, rng):
        w = rng.standard_normal((4, 4))

        def run():
            loss = float(w.sum())
            return loss, {"w": np.ones_like(w)}

        report = grad_check(run, {"w": w}, h=FD_H)
        assert report.max_rel_error < 1e-8

    def test_single_conv_layer(self, rng):
        conv = Conv2d(2, 2, rng=rng)
        conv.weight = conv.weight.astype(np.float64)
        conv.bias = conv.bias.astype(np.float64)
        x = rng.standard_normal((1, 2, 4, 4))
        report = grad_check(layer_loss_fn(conv, x),
                            {"weight": conv.weight, "x": x}, h=FD_H)
        assert report.max_rel_error < FD_TOL


class TestBackendParity:
    @pytest.fixture(autouse=True)
    def _restore(self):
        original = backend.active_backend()
        yield
        backend.set_backend(original)

    @pytest.mark.skipif("cython" not in backend.available_backends(),
                        reason="compiled extension not built")
    @pytest.mark.parametrize("stride", [1, 2])
    def test_backends_agree(self, rng, stride):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        conv = Conv2d(3, 4, stride=stride, rng=rng)
        deconv = Deconv2d(3, 4, stride=stride, rng=rng)
        outs = {}
        for name in ("cython", "numpy"):
            backend.set_backend(name)
            outs[name] = (conv.forward(x), deconv.forward(x))
        np.testing.assert_allclose(outs["cython"][0], outs["numpy"][0], atol=1e-5)
        np.testing.assert_allclose(outs["cython"][1], outs["numpy"][1], atol=1e-5)

    @pytest.mark.skipif("cython" not in backend.available_backends(),
                        reason="compiled extension not built")
    def test_parallel_matches_single_thread(self, rng):
        backend.set_backend("cython")
        x = rng.standard_normal((2, 8, 16, 16)).astype(np.float32)
        conv = Conv2d(8, 8, stride=2, rng=rng)
        threads = backend.num_threads()
        try:
            backend.set_num_threads(1)
            single = conv.forward(x)
            backend.set_num_threads(4)
            parallel = conv.forward(x)
        finally:
            backend.set_num_threads(threads)
        np.testing.assert_allclose(single, parallel, atol=1e-5)

    def test_forward_deterministic(self, rng):
        x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
        conv = Conv2d(3, 5, rng=np.random.default_rng(7))
        conv2 = Conv2d(3, 5, rng=np.random.default_rng(7))
        assert np.array_equal(conv.forward(x), conv2.forward(x))
