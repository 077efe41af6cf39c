#!/usr/bin/env python3
"""
Tests for convolution, adaptive convolution, bilinear sampling and SGD
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import ConfigError, ShapeError
from tensor_core import (
    ConvParams,
    adaptive_conv,
    adaptive_conv_backward,
    bilinear_sample,
    conv2d,
    conv2d_backward,
    init_conv_params,
    regular_grid,
    relu,
    relu_backward,
    sgd_step,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def conv_oracle(x, weights, bias, dilation=1, stride=1):
    """Direct nested-loop convolution with zero padding"""
    n, c, h, w = x.shape
    out_c, _, kh, kw = weights.shape
    out_h, out_w = (h - 1) // stride + 1, (w - 1) // stride + 1
    y = np.zeros((n, out_c, out_h, out_w))
    for b in range(n):
        for o in range(out_c):
            for i in range(out_h):
                for j in range(out_w):
                    total = bias[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                yy = i * stride + (u - kh // 2) * dilation
                                xx = j * stride + (v - kw // 2) * dilation
                                if 0 <= yy < h and 0 <= xx < w:
                                    total += weights[o, ch, u, v] * x[b, ch, yy, xx]
                    y[b, o, i, j] = total
    return y


def bilinear_oracle(image, y, x):
    """Explicit four-corner bilinear weights on one (h, w) channel"""
    h, w = image.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    total = 0.0
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * image[yy, xx]
    return total


def adaptive_oracle(x, weights, bias, offsets, dilation=1):
    n, c, h, w = x.shape
    out_c, _, kh, kw = weights.shape
    grid = regular_grid(kh, kw, dilation)
    y = np.zeros((n, out_c, h, w))
    for b in range(n):
        for o in range(out_c):
            for i in range(h):
                for j in range(w):
                    total = bias[o]
                    for k in range(kh * kw):
                        sy = i + grid[k, 0] + offsets[i, j, k, 0]
                        sx = j + grid[k, 1] + offsets[i, j, k, 1]
                        for ch in range(c):
                            total += weights[o, ch, k // kw, k % kw] * bilinear_oracle(x[b, ch], sy, sx)
                    y[b, o, i, j] = total
    return y


def test_conv_zero_input_gives_zero_output(rng):
    p = ConvParams(rng.normal(size=(2, 1, 3, 3)), np.zeros(2))
    y = conv2d(np.zeros((1, 1, 3, 3)), p)
    assert y.shape == (1, 2, 3, 3)
    assert np.all(y == 0)


def test_conv_identity_kernel(rng):
    weights = np.zeros((1, 1, 3, 3))
    weights[0, 0, 1, 1] = 1.0
    x = rng.normal(size=(1, 1, 5, 5))
    np.testing.assert_array_equal(conv2d(x, ConvParams(weights, np.zeros(1))), x)


def test_conv_ramp_with_ones_kernel_matches_loop_oracle():
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    weights = np.ones((1, 1, 3, 3))
    y = conv2d(x, ConvParams(weights, np.zeros(1)))
    np.testing.assert_allclose(y, conv_oracle(x, weights, np.zeros(1)), atol=1e-10)
    # top-left corner sees the 2x2 block 0, 1, 5, 6
    assert y[0, 0, 0, 0] == pytest.approx(12.0)


@pytest.mark.parametrize("dilation,stride", [(1, 1), (2, 1), (1, 2), (2, 2)])
def test_conv_matches_oracle_with_dilation_and_stride(rng, dilation, stride):
    x = rng.normal(size=(2, 3, 7, 6))
    p = ConvParams(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), dilation=dilation, stride=stride)
    np.testing.assert_allclose(conv2d(x, p), conv_oracle(x, p.weights, p.bias, dilation, stride), atol=1e-10)


def test_conv_is_linear_in_input_and_weights(rng):
    x, z = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(2, 3, 6, 5))
    w, v = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=(4, 3, 3, 3))
    zero = np.zeros(4)
    a, b = 1.7, -0.4
    for dilation, stride in ((1, 1), (2, 2)):
        p = ConvParams(w, zero, dilation=dilation, stride=stride)
        np.testing.assert_allclose(conv2d(a * x + b * z, p), a * conv2d(x, p) + b * conv2d(z, p), atol=1e-10)
        mixed = ConvParams(a * w + b * v, zero, dilation=dilation, stride=stride)
        expected = a * conv2d(x, p) + b * conv2d(x, ConvParams(v, zero, dilation=dilation, stride=stride))
        np.testing.assert_allclose(conv2d(x, mixed), expected, atol=1e-10)


def test_conv_rejects_even_kernels_and_channel_mismatch(rng):
    with pytest.raises(ConfigError):
        ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1))
    p = ConvParams(np.zeros((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError) as err:
        conv2d(np.zeros((1, 3, 4, 4)), p)
    assert "(1, 3, 4, 4)" in str(err.value)


def test_conv_backward_is_adjoint_of_forward(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), dilation=2, stride=2)
    y = conv2d(x, p)
    grad_y = rng.normal(size=y.shape)
    grad_x, grad_w, grad_b = conv2d_backward(grad_y, x, p)

    # <grad_y, conv(x) - bias> is linear in x and in the weights
    linear = np.sum(grad_y * (y - p.bias[None, :, None, None]))
    assert np.sum(grad_x * x) == pytest.approx(linear)
    assert np.sum(grad_w * p.weights) == pytest.approx(linear)
    np.testing.assert_allclose(grad_b, grad_y.sum(axis=(0, 2, 3)))


def test_bilinear_sample_at_integer_coordinates_is_indexing(rng):
    x = rng.normal(size=(1, 2, 4, 5))
    ys = np.array([[0.0, 3.0], [1.0, 2.0]])
    xs = np.array([[4.0, 0.0], [2.0, 1.0]])
    out = bilinear_sample(x, ys, xs)
    np.testing.assert_array_equal(out, x[:, :, ys.astype(int), xs.astype(int)])


def test_bilinear_sample_outside_is_zero(rng):
    x = rng.normal(size=(1, 1, 3, 3))
    out = bilinear_sample(x, np.array([-5.0, 10.0]), np.array([1.0, 1.0]))
    assert np.all(out == 0)


def test_adaptive_conv_with_zero_offsets_equals_dilated_conv(rng):
    for dilation in (1, 2, 3):
        x = rng.normal(size=(1, 3, 8, 8))
        p = ConvParams(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), dilation=dilation)
        offsets = np.zeros((8, 8, 9, 2))
        np.testing.assert_allclose(adaptive_conv(x, p, offsets), conv2d(x, p), rtol=1e-5, atol=1e-5)


def test_adaptive_conv_grid_offsets_reproduce_dilated_conv(rng):
    # offsets relative to the dilation-1 grid that land on the dilation-2 grid
    for _ in range(100):
        x = rng.normal(size=(1, 2, 6, 6))
        weights, bias = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
        shift = regular_grid(3, 3, 2) - regular_grid(3, 3, 1)
        offsets = np.broadcast_to(shift, (6, 6, 9, 2)).copy()
        dilated = conv2d(x, ConvParams(weights, bias, dilation=2))
        adaptive = adaptive_conv(x, ConvParams(weights, bias), offsets)
        assert np.max(np.abs(adaptive - dilated)) <= 1e-5


def test_adaptive_conv_far_offsets_give_bias(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), np.array([0.5, -1.0, 2.0]))
    offsets = np.full((4, 4, 9, 2), 100.0)
    y = adaptive_conv(x, p, offsets)
    np.testing.assert_allclose(y, np.broadcast_to(p.bias[None, :, None, None], y.shape))


def test_adaptive_conv_matches_bilinear_oracle(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    p = ConvParams(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
    offsets = rng.uniform(-1.7, 1.7, size=(6, 6, 9, 2))
    np.testing.assert_allclose(adaptive_conv(x, p, offsets), adaptive_oracle(x, p.weights, p.bias, offsets),
                               atol=1e-10)


def test_adaptive_conv_rejects_bad_offsets(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    p = ConvParams(rng.normal(size=(1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        adaptive_conv(x, p, np.zeros((4, 4, 4, 2)))
    with pytest.raises(ShapeError):
        adaptive_conv(x, p, np.zeros((3, 4, 9, 2)))


def test_adaptive_backward_zero_grad(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    offsets = rng.uniform(-1, 1, size=(5, 5, 9, 2))
    grads = adaptive_conv_backward(np.zeros((1, 3, 5, 5)), x, p, offsets)
    assert all(np.all(g == 0) for g in grads)


def test_adaptive_backward_single_tap_integer_offsets_scatter(rng):
    x = rng.normal(size=(1, 1, 5, 5))
    p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    offsets = rng.integers(-2, 3, size=(5, 5, 1, 2)).astype(np.float64)
    grad_y = rng.normal(size=(1, 1, 5, 5))
    grad_x, _, _ = adaptive_conv_backward(grad_y, x, p, offsets)

    expected = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            yy, xx = i + int(offsets[i, j, 0, 0]), j + int(offsets[i, j, 0, 1])
            if 0 <= yy < 5 and 0 <= xx < 5:
                expected[yy, xx] += grad_y[0, 0, i, j]
    np.testing.assert_allclose(grad_x[0, 0], expected, atol=1e-12)


def test_adaptive_backward_matches_finite_differences(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    p = ConvParams(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
    offsets = rng.uniform(-1.3, 1.3, size=(4, 4, 9, 2))
    grad_y = rng.normal(size=(1, 2, 4, 4))
    grad_x, grad_w, grad_b = adaptive_conv_backward(grad_y, x, p, offsets)

    eps = 1e-3
    for target, analytic in ((x, grad_x), (p.weights, grad_w), (p.bias, grad_b)):
        flat = target.reshape(-1)
        for i in rng.choice(flat.size, size=min(10, flat.size), replace=False):
            original = flat[i]
            flat[i] = original + eps
            plus = np.sum(adaptive_conv(x, p, offsets) * grad_y)
            flat[i] = original - eps
            minus = np.sum(adaptive_conv(x, p, offsets) * grad_y)
            flat[i] = original
            numeric = (plus - minus) / (2 * eps)
            assert analytic.reshape(-1)[i] == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_relu_backward_masks_inactive_units():
    x = np.array([-1.0, 0.0, 2.0])
    y = relu(x)
    np.testing.assert_array_equal(relu_backward(np.ones(3), y), [0.0, 0.0, 1.0])


def test_init_conv_params_is_seeded_and_bounded():
    a = init_conv_params(4, 3, 3, np.random.default_rng(5))
    b = init_conv_params(4, 3, 3, np.random.default_rng(5))
    np.testing.assert_array_equal(a.weights, b.weights)
    assert np.all(np.abs(a.weights) <= 1 / np.sqrt(27))
    assert np.all(a.bias == 0)
    assert a.weights.dtype == np.float32


def test_sgd_zero_gradients_leave_params_unchanged(rng):
    params = [rng.normal(size=(2, 3))]
    new_params, new_buffers = sgd_step(params, [np.zeros((2, 3))], 0.1, 0.9, [np.zeros((2, 3))])
    np.testing.assert_array_equal(new_params[0], params[0])
    assert np.all(new_buffers[0] == 0)


def test_sgd_plain_step_decreases_by_lr():
    params = [np.full((2, 2), 3.0)]
    new_params, _ = sgd_step(params, [np.ones((2, 2))], 1.0, 0.0, [np.zeros((2, 2))])
    np.testing.assert_array_equal(new_params[0], np.full((2, 2), 2.0))


def test_sgd_two_momentum_steps_match_unrolled_recurrence():
    p0, g1, g2 = np.array([1.0]), np.array([0.5]), np.array([-0.2])
    lr, mu = 0.1, 0.9
    params, buffers = sgd_step([p0], [g1], lr, mu, [np.zeros(1)])
    params, buffers = sgd_step(params, [g2], lr, mu, buffers)
    v1 = g1
    v2 = mu * v1 + g2
    np.testing.assert_allclose(params[0], p0 - lr * v1 - lr * v2)
    np.testing.assert_allclose(buffers[0], v2)


def test_sgd_rejects_bad_hyperparameters():
    with pytest.raises(ConfigError):
        sgd_step([np.zeros(1)], [np.zeros(1)], -0.1, 0.0, [np.zeros(1)])
    with pytest.raises(ConfigError):
        sgd_step([np.zeros(1)], [np.zeros(1)], 0.1, 1.0, [np.zeros(1)])
    with pytest.raises(ShapeError):
        sgd_step([np.zeros(1)], [np.zeros(2)], 0.1, 0.0, [np.zeros(1)])
