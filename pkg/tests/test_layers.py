"""Operational-layer forward paths and hand-derived gradients.

The reference oracle here is a scalar-loop transcription of the defining
polynomial sum, written independently of the library code; gradients are
checked against central finite differences.
"""

import numpy as np
import pytest

from selfonn.layers import (
    ConvLayer,
    OpLayer,
    backward,
    conv2d_direct,
    forward_gemm,
    forward_gemm_cached,
    forward_naive,
    forward_qconv,
)


def polynomial_sum_oracle(weights, bias, x, pad):
    """Scalar-loop transcription of the generative-neuron sum."""
    out_ch, in_ch, q_max, k, _ = weights.shape
    n, c, h, w = x.shape
    oh, ow = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, out_ch, oh, ow))
    for b in range(n):
        for o in range(out_ch):
            for m in range(oh):
                for nn in range(ow):
                    s = 0.0 if bias is None else bias[o]
                    for i in range(in_ch):
                        for q in range(1, q_max + 1):
                            for r in range(k):
                                for t in range(k):
                                    s += weights[o, i, q - 1, r, t] * xp[b, i, m + r, nn + t] ** q
                    out[b, o, m, nn] = s
    return out


def conv2d_oracle(x, w4, bias, pad):
    """Textbook correlation written as scalar loops."""
    n, c, h, w = x.shape
    out_ch, _, k, _ = w4.shape
    oh, ow = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, out_ch, oh, ow))
    for b in range(n):
        for o in range(out_ch):
            for m in range(oh):
                for nn in range(ow):
                    s = 0.0 if bias is None else bias[o]
                    for i in range(c):
                        for r in range(k):
                            for t in range(k):
                                s += w4[o, i, r, t] * xp[b, i, m + r, nn + t]
                    out[b, o, m, nn] = s
    return out


def random_layer(rng, in_ch, out_ch, k, q, bias=False):
    return OpLayer(in_ch, out_ch, k, q, bias=bias, rng=rng)


class TestForwardNaive:
    def test_identity_kernel(self):
        layer = OpLayer(1, 1, 1, 1, weights=np.ones((1, 1, 1, 1, 1)))
        x = np.random.default_rng(0).standard_normal((1, 1, 3, 3))
        np.testing.assert_array_equal(forward_naive(layer, x), x)

    def test_polynomial_of_scalar(self):
        layer = OpLayer(1, 1, 1, 3, weights=np.ones((1, 1, 3, 1, 1)))
        x = np.full((1, 1, 1, 1), 0.5)
        out = forward_naive(layer, x)
        assert out[0, 0, 0, 0] == pytest.approx(0.875, abs=1e-15)

    def test_matches_literal_transcription(self):
        rng = np.random.default_rng(42)
        layer = random_layer(rng, 1, 2, 3, 3, bias=True)
        layer.bias[:] = rng.standard_normal(2)
        x = rng.uniform(-1, 1, size=(1, 1, 4, 4))
        expected = polynomial_sum_oracle(layer.weights, layer.bias, x, layer.pad)
        np.testing.assert_allclose(forward_naive(layer, x), expected, rtol=0, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        layer = OpLayer(2, 1, 3, 1)
        with pytest.raises(ValueError, match="channels"):
            forward_naive(layer, np.ones((1, 3, 4, 4)))


class TestForwardQconv:
    def test_q1_equals_plain_convolution_exactly(self):
        rng = np.random.default_rng(1)
        layer = random_layer(rng, 2, 3, 3, 1)
        x = rng.uniform(-1, 1, size=(2, 2, 5, 5))
        conv = conv2d_direct(x, layer.weights[:, :, 0], layer.pad)
        np.testing.assert_array_equal(forward_qconv(layer, x), conv)

    def test_matches_naive(self):
        rng = np.random.default_rng(2)
        layer = random_layer(rng, 2, 3, 3, 3)
        x = rng.uniform(-1, 1, size=(1, 2, 8, 8))
        np.testing.assert_allclose(
            forward_qconv(layer, x), forward_naive(layer, x), rtol=0, atol=1e-10
        )

    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(3)
        layer = random_layer(rng, 2, 3, 3, 2, bias=True)
        layer.bias[:] = [0.5, -1.0, 2.0]
        out = forward_qconv(layer, np.zeros((1, 2, 4, 4)))
        for o, b in enumerate(layer.bias):
            np.testing.assert_array_equal(out[0, o], np.full((4, 4), b))


class TestForwardGemm:
    def test_matches_naive_random_instances(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            in_ch = int(rng.integers(1, 5))
            out_ch = int(rng.integers(1, 5))
            k = int(rng.choice([1, 3]))
            q = int(rng.choice([1, 2, 3, 5]))
            h = int(rng.integers(k, 9))
            w = int(rng.integers(k, 9))
            layer = random_layer(rng, in_ch, out_ch, k, q, bias=bool(rng.integers(0, 2)))
            x = rng.uniform(-1, 1, size=(2, in_ch, h, w))
            np.testing.assert_allclose(
                forward_gemm(layer, x), forward_naive(layer, x), rtol=0, atol=1e-10
            )

    def test_q1_bitwise_equal_to_conv_layer(self):
        rng = np.random.default_rng(5)
        layer = random_layer(rng, 3, 4, 3, 1)
        conv = ConvLayer(3, 4, 3, weights=layer.weights[:, :, 0])
        x = rng.uniform(-1, 1, size=(2, 3, 6, 6))
        np.testing.assert_array_equal(forward_gemm(layer, x), conv.forward(x))

    def test_smallest_polynomial_row(self):
        a, b = 0.7, -0.3
        layer = OpLayer(1, 1, 1, 2, weights=np.array([a, b]).reshape(1, 1, 2, 1, 1))
        x = np.array([[[[0.4]]]])
        out = forward_gemm(layer, x)
        assert out[0, 0, 0, 0] == pytest.approx(a * 0.4 + b * 0.16, abs=1e-15)

    def test_conv_oracle_cross_path(self):
        rng = np.random.default_rng(6)
        layer = random_layer(rng, 2, 2, 3, 1, bias=True)
        layer.bias[:] = rng.standard_normal(2)
        x = rng.uniform(-1, 1, size=(1, 2, 5, 5))
        expected = conv2d_oracle(x, layer.weights[:, :, 0], layer.bias, layer.pad)
        np.testing.assert_allclose(forward_gemm(layer, x), expected, rtol=0, atol=1e-12)


class TestProperties:
    def test_linearity_in_weights(self):
        rng = np.random.default_rng(7)
        layer = random_layer(rng, 2, 2, 3, 3)
        x = rng.uniform(-1, 1, size=(1, 2, 5, 5))
        base = forward_gemm(layer, x)
        for alpha in [0.0, -1.5, 2.0]:
            scaled = OpLayer(2, 2, 3, 3, weights=alpha * layer.weights)
            np.testing.assert_allclose(
                forward_gemm(scaled, x), alpha * base, rtol=0, atol=1e-12
            )
        # per-q slices superpose to the whole
        total = np.zeros_like(base)
        for qi in range(3):
            w = np.zeros_like(layer.weights)
            w[:, :, qi] = layer.weights[:, :, qi]
            total += forward_gemm(OpLayer(2, 2, 3, 3, weights=w), x)
        np.testing.assert_allclose(total, base, rtol=0, atol=1e-12)

    def test_same_mode_preserves_shape(self):
        rng = np.random.default_rng(8)
        for k in [1, 3, 5]:
            layer = random_layer(rng, 1, 2, k, 2)
            for h, w in [(k, k), (k + 2, k), (7, 9)]:
                if h < k or w < k:
                    continue
                out = forward_gemm(layer, rng.uniform(-1, 1, size=(1, 1, h, w)))
                assert out.shape == (1, 2, h, w)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="even"):
            OpLayer(1, 1, 2, 1)

    def test_outputs_finite(self):
        rng = np.random.default_rng(9)
        layer = random_layer(rng, 2, 2, 3, 5)
        out = forward_gemm(layer, rng.uniform(-1, 1, size=(1, 2, 6, 6)))
        assert np.isfinite(out).all()


def fd_grad(fn, arr, eps=1e-5):
    """Central finite differences of scalar fn w.r.t. every entry of arr."""
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = g.ravel()
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + eps
        up = fn()
        flat[idx] = orig - eps
        down = fn()
        flat[idx] = orig
        gflat[idx] = (up - down) / (2 * eps)
    return g


def assert_grads_close(analytic, numeric, rtol=1e-5, atol=1e-7):
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    bad = err > np.maximum(atol, rtol * scale)
    assert not bad.any(), f"max deviation {err.max():.3e} at {np.argwhere(bad)[0]}"


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(10)
        layer = random_layer(rng, 2, 2, 3, 3, bias=True)
        x = rng.uniform(-1, 1, size=(1, 2, 5, 5))
        grads = backward(layer, x, np.zeros((1, 2, 5, 5)))
        assert not grads.d_weights.any()
        assert not grads.d_bias.any()
        assert not grads.d_input.any()

    def test_q1_matches_textbook_conv_gradients(self):
        rng = np.random.default_rng(11)
        layer = random_layer(rng, 2, 3, 3, 1, bias=True)
        x = rng.uniform(-1, 1, size=(2, 2, 5, 5))
        d_out = rng.standard_normal((2, 3, 5, 5))
        grads = backward(layer, x, d_out)

        # conv weight gradient: correlation of input with upstream
        k, p = layer.k, layer.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        dw = np.zeros_like(layer.weights[:, :, 0])
        for o in range(3):
            for i in range(2):
                for r in range(k):
                    for t in range(k):
                        dw[o, i, r, t] = np.sum(d_out[:, o] * xp[:, i, r : r + 5, t : t + 5])
        np.testing.assert_allclose(grads.d_weights[:, :, 0], dw, rtol=0, atol=1e-10)

        # conv input gradient: full correlation with flipped kernel
        dxp = np.zeros_like(xp)
        for o in range(3):
            for i in range(2):
                for r in range(k):
                    for t in range(k):
                        dxp[:, i, r : r + 5, t : t + 5] += layer.weights[o, i, 0, r, t] * d_out[:, o]
        np.testing.assert_allclose(grads.d_input, dxp[:, :, p:-p, p:-p], rtol=0, atol=1e-10)
        np.testing.assert_allclose(grads.d_bias, d_out.sum(axis=(0, 2, 3)), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("q", [1, 2, 3, 5])
    def test_finite_difference_agreement(self, q):
        rng = np.random.default_rng(100 + q)
        layer = random_layer(rng, 2, 2, 3, q, bias=True)
        x = rng.uniform(-1, 1, size=(1, 2, 5, 5))
        d_out = rng.standard_normal((1, 2, 5, 5))

        def objective():
            return float(np.sum(forward_gemm(layer, x) * d_out))

        grads = backward(layer, x, d_out)
        assert_grads_close(grads.d_weights, fd_grad(objective, layer.weights))
        assert_grads_close(grads.d_bias, fd_grad(objective, layer.bias))
        assert_grads_close(grads.d_input, fd_grad(objective, x))

    def test_shape_mismatch_rejected(self):
        layer = OpLayer(1, 1, 3, 1)
        with pytest.raises(ValueError, match="d_out"):
            backward(layer, np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)))

    def test_cols_reuse_matches_fresh_backward(self):
        rng = np.random.default_rng(13)
        layer = random_layer(rng, 2, 2, 3, 3)
        x = rng.uniform(-1, 1, size=(2, 2, 6, 6))
        d_out = rng.standard_normal((2, 2, 6, 6))
        y, cols = forward_gemm_cached(layer, x)
        np.testing.assert_array_equal(y, forward_gemm(layer, x))
        from selfonn.layers import backward_with_cols

        g1 = backward(layer, x, d_out)
        g2 = backward_with_cols(layer, x, cols, d_out)
        np.testing.assert_array_equal(g1.d_weights, g2.d_weights)
        np.testing.assert_array_equal(g1.d_input, g2.d_input)
