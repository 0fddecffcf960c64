import math

import mpmath
import numpy as np
import pytest

from conftest import rel_err
from rapidnet.errors import GeometryError, LabelError, ShapeError, StateError
from rapidnet.ops import (
    BatchNorm2d,
    Conv2dLayer,
    LinearLayer,
    batchnorm_backward,
    batchnorm_forward,
    conv2d,
    conv2d_naive,
    gelu,
    gelu_backward,
    global_avg_pool,
    linear,
    out_shape,
    softmax_cross_entropy,
)
from rapidnet.tensor import Rng


def make_conv(c_in, c_out, k, rng=None, **kw):
    return Conv2dLayer.create(c_in, c_out, k, rng=rng, **kw)


class TestOutShape:
    def test_stride_two_halving(self):
        conv = make_conv(3, 8, 3, stride=2, padding=1)
        assert out_shape(224, 224, conv) == (112, 112)

    def test_dilated_no_padding(self):
        conv = make_conv(1, 1, 3, dilation=2)
        assert out_shape(7, 7, conv) == (3, 3)

    def test_same_padding_dilated(self):
        conv = make_conv(1, 1, 3, dilation=3, padding=3)
        assert out_shape(14, 14, conv) == (14, 14)

    def test_same_padding_preserves_odd_kernels(self):
        for k in (1, 3, 5, 7):
            for d in (1, 2, 3):
                conv = make_conv(1, 1, k, dilation=d, padding=d * (k - 1) // 2)
                assert out_shape(16, 16, conv) == (16, 16)

    def test_invalid_geometry(self):
        conv = make_conv(1, 1, 7, dilation=3)  # effective kernel 19
        with pytest.raises(GeometryError):
            out_shape(10, 10, conv)


class TestConv2d:
    def test_dilated_ones(self):
        # 3x3 all-ones kernel at dilation 2 over a 7x7 ones image: 9 taps each
        conv = Conv2dLayer(np.ones((1, 1, 3, 3), dtype=np.float32), dilation=2)
        out = conv2d(np.ones((1, 1, 7, 7), dtype=np.float32), conv)
        assert out.shape == (1, 1, 3, 3)
        assert np.allclose(out, 9.0)

    def test_identity_kernel(self, rng):
        w = np.zeros((4, 4, 3, 3), dtype=np.float32)
        for c in range(4):
            w[c, c, 1, 1] = 1.0
        conv = Conv2dLayer(w, padding=1)
        x = rng.normal((2, 4, 6, 6))
        assert np.allclose(conv2d(x, conv), x)

    def test_depthwise_identity_1x1(self, rng):
        conv = Conv2dLayer(np.ones((5, 1, 1, 1), dtype=np.float32), groups=5)
        x = rng.normal((1, 5, 4, 4))
        assert np.array_equal(conv2d(x, conv), x)

    def test_channel_mismatch(self, rng):
        conv = make_conv(3, 8, 3, rng=rng)
        with pytest.raises(ShapeError):
            conv2d(rng.normal((1, 4, 8, 8)), conv)

    def test_dilation_one_bit_identical_to_plain_path(self, rng):
        # a hand-rolled regular (d=1) im2col path must agree bit for bit
        conv = make_conv(3, 6, 3, stride=2, padding=1, rng=rng)
        x = rng.normal((2, 3, 9, 9))
        got = conv2d(x, conv)

        n, c, h, w = x.shape
        k, s, p = 3, 2, 1
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        img = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        col = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                col[:, :, i, j] = img[:, :, i:i + s * oh:s, j:j + s * ow:s]
        col = col.reshape(n, 1, c * k * k, oh * ow)
        wmat = conv.weight.value.reshape(1, 6, c * k * k)
        ref = np.matmul(wmat, col).reshape(n, 6, oh, ow)
        ref += conv.bias.value[None, :, None, None]
        assert np.array_equal(got, ref)


class TestConvOracle:
    def test_zero_weights(self, rng):
        conv = make_conv(2, 3, 3, padding=1)
        conv.bias.value[:] = [1.0, 2.0, 3.0]
        out = conv2d_naive(rng.normal((1, 2, 5, 5)), conv)
        assert np.allclose(out, np.array([1.0, 2.0, 3.0])[None, :, None, None])

    def test_naive_matches_opt_basic(self, rng):
        conv = make_conv(4, 6, 3, stride=2, padding=2, dilation=2, rng=rng)
        x = rng.normal((2, 4, 9, 9))
        assert rel_err(conv2d(x, conv), conv2d_naive(x, conv)) < 1e-5

    def test_naive_matches_opt_depthwise_dilated(self, rng):
        conv = make_conv(4, 4, 3, padding=3, dilation=3, groups=4, rng=rng)
        x = rng.normal((1, 4, 8, 8))
        assert rel_err(conv2d(x, conv), conv2d_naive(x, conv)) < 1e-5

    def test_randomized_configurations(self):
        # spans k, dilation, stride, and depthwise/dense grouping
        rng = Rng(99)
        for trial in range(40):
            k = int(rng.integers(0, 4))
            k = (1, 3, 5, 7)[k]
            d = int(rng.integers(1, 4))
            s = int(rng.integers(1, 3))
            c = int(rng.integers(1, 5))
            groups = 1 if int(rng.integers(0, 2)) == 0 else c
            p = int(rng.integers(0, 3))
            k_eff = (k - 1) * d + 1
            h = k_eff + int(rng.integers(0, 4))
            n = int(rng.integers(1, 3))
            conv = make_conv(c, c, k, stride=s, padding=p, dilation=d, groups=groups, rng=rng)
            x = rng.normal((n, c, h, h))
            assert rel_err(conv2d(x, conv), conv2d_naive(x, conv)) < 1e-5, (
                f"trial {trial}: k={k} d={d} s={s} p={p} c={c} g={groups} h={h}")


class TestBatchNorm:
    def test_eval_identity_stats(self, rng):
        bn = BatchNorm2d.create(3)
        bn.mode = "eval"
        x = rng.normal((2, 3, 4, 4))
        out = batchnorm_forward(x, bn)
        assert np.allclose(out, x / np.sqrt(1.0 + bn.eps), atol=1e-6)

    def test_train_normalizes(self, rng):
        bn = BatchNorm2d.create(5, dtype=np.float64)
        bn.mode = "train"
        x = rng.normal((4, 5, 6, 6), mean=2.0, std=3.0, dtype=np.float64)
        out = batchnorm_forward(x, bn)
        mean = out.mean(axis=(0, 2, 3))
        std = out.std(axis=(0, 2, 3))
        assert np.max(np.abs(mean)) < 1e-6
        assert np.max(np.abs(std - 1.0)) < 1e-4

    def test_eval_affine(self, rng):
        bn = BatchNorm2d.create(2)
        bn.gamma.value[:] = 2.0
        bn.beta.value[:] = 3.0
        bn.mode = "eval"
        x = rng.normal((1, 2, 3, 3))
        out = batchnorm_forward(x, bn)
        assert np.allclose(out, 2.0 * x / np.sqrt(1.0 + bn.eps) + 3.0, atol=1e-5)

    def test_running_stats_update(self, rng):
        bn = BatchNorm2d.create(3, dtype=np.float64)
        bn.mode = "train"
        x = rng.normal((8, 3, 4, 4), mean=1.0, std=2.0, dtype=np.float64)
        for _ in range(300):
            batchnorm_forward(x, bn)
        # running stats converge to the (biased) batch statistics
        assert np.allclose(bn.running_mean, x.mean(axis=(0, 2, 3)), atol=1e-6)
        assert np.allclose(bn.running_var, x.var(axis=(0, 2, 3)), atol=1e-6)
        bn.mode = "eval"
        eval_out = batchnorm_forward(x, bn)
        bn.mode = "train"
        train_out = batchnorm_forward(x, bn)
        assert np.max(np.abs(eval_out - train_out)) < 1e-3

    def test_backward_eval_rejected(self, rng):
        bn = BatchNorm2d.create(2)
        bn.mode = "eval"
        x = rng.normal((1, 2, 3, 3))
        with pytest.raises(StateError):
            batchnorm_backward(x, bn, np.zeros_like(x))

    def test_backward_zero_grad(self, rng):
        bn = BatchNorm2d.create(2, dtype=np.float64)
        bn.mode = "train"
        x = rng.normal((2, 2, 3, 3), dtype=np.float64)
        r = batchnorm_backward(x, bn, np.zeros_like(x))
        assert np.all(r.grad_input == 0)
        assert np.all(r.grad_params["gamma"] == 0)
        assert np.all(r.grad_params["beta"] == 0)

    def test_gamma_grad_of_constant_input(self):
        # constant input normalizes to ~0, so the gamma gradient vanishes
        bn = BatchNorm2d.create(2, dtype=np.float64)
        bn.mode = "train"
        x = np.full((2, 2, 3, 3), 5.0)
        r = batchnorm_backward(x, bn, np.ones_like(x))
        assert np.max(np.abs(r.grad_params["gamma"])) < 1e-6

    def test_channel_mismatch(self, rng):
        bn = BatchNorm2d.create(3)
        with pytest.raises(ShapeError):
            batchnorm_forward(rng.normal((1, 4, 2, 2)), bn)


class TestGelu:
    def test_zero(self):
        assert gelu(np.array([0.0]))[0] == 0.0

    def test_derivative_at_zero(self):
        g = gelu_backward(np.array([0.0]), np.array([1.0]))
        assert g[0] == pytest.approx(0.5)

    def test_large_input_passthrough(self):
        assert gelu(np.array([10.0]))[0] == pytest.approx(10.0, abs=1e-6)

    def test_matches_high_precision_erf(self):
        # independent oracle: x * Phi(x) with mpmath's arbitrary-precision erf
        for x in (-2.0, -0.5, 0.3, 1.0, 2.5):
            expected = float(mpmath.mpf(x) * 0.5 * (1 + mpmath.erf(mpmath.mpf(x) / mpmath.sqrt(2))))
            got = float(gelu(np.array([x], dtype=np.float64))[0])
            assert got == pytest.approx(expected, rel=1e-12)

    def test_preserves_dtype(self):
        assert gelu(np.ones(3, dtype=np.float32)).dtype == np.float32
        assert gelu(np.ones(3, dtype=np.float64)).dtype == np.float64


class TestPooling:
    def test_ones(self):
        out = global_avg_pool(np.ones((1, 3, 7, 7), dtype=np.float32))
        assert out.shape == (1, 3)
        assert np.allclose(out, 1.0)

    def test_single_pixel_identity(self, rng):
        x = rng.normal((2, 5, 1, 1))
        assert np.array_equal(global_avg_pool(x), x[:, :, 0, 0])

    def test_matches_loop_sum(self, rng):
        x = rng.normal((2, 3, 5, 4), dtype=np.float64)
        got = global_avg_pool(x)
        for n in range(2):
            for c in range(3):
                acc = 0.0
                for i in range(5):
                    for j in range(4):
                        acc += x[n, c, i, j]
                assert got[n, c] == pytest.approx(acc / 20.0, rel=1e-6)


class TestLinear:
    def test_identity(self):
        layer = LinearLayer(np.eye(3, dtype=np.float32), np.zeros(3, dtype=np.float32))
        x = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
        assert np.allclose(linear(x, layer), x)

    def test_arithmetic(self):
        layer = LinearLayer(np.array([[1.0, 1.0]]), np.array([0.5]))
        assert linear(np.array([[1.0, 2.0]]), layer)[0, 0] == pytest.approx(3.5)

    def test_shape_mismatch(self, rng):
        layer = LinearLayer.create(4, 2, rng=rng)
        with pytest.raises(ShapeError):
            linear(rng.normal((1, 5)), layer)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros((3, 10)), [0, 5, 9])
        assert loss == pytest.approx(math.log(10.0), rel=1e-6)

    def test_confident_correct(self):
        logits = np.zeros((2, 4))
        logits[0, 1] = 30.0
        logits[1, 3] = 30.0
        loss, _ = softmax_cross_entropy(logits, [1, 3])
        assert loss < 1e-9

    def test_out_of_range_label(self):
        with pytest.raises(LabelError):
            softmax_cross_entropy(np.zeros((1, 4)), [4])
        with pytest.raises(LabelError):
            softmax_cross_entropy(np.zeros((1, 4)), [-1])

    def test_grad_sums_to_zero(self, rng):
        logits = rng.normal((4, 6), dtype=np.float64)
        _, grad = softmax_cross_entropy(logits, [0, 1, 2, 3])
        assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_large_logits_stable(self):
        logits = np.array([[1000.0, 1000.0]])
        loss, grad = softmax_cross_entropy(logits, [0])
        assert math.isfinite(loss)
        assert np.all(np.isfinite(grad))
