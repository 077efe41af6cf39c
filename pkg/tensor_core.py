"""
Dense 4-D tensor kernels with hand-written backward passes.

Tensors are plain numpy arrays laid out (batch, channel, height, width).
Production paths run in float32; every kernel preserves the dtype of its
input so gradient checks can run the same code in float64.

Sampling contract shared by the convolutions: zero padding, "same" spatial
output, and out-of-bounds bilinear samples read as zero.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from errors import ConfigError, ShapeError

DEFAULT_DTYPE = np.float32


@dataclass
class ConvParams:
    """Weights (out_c, in_c, kh, kw), bias (out_c,), dilation and stride of one conv"""

    weights: np.ndarray
    bias: np.ndarray
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError("conv weights must be 4-D", "(out_c, in_c, kh, kw)", self.weights.shape)
        kh, kw = self.weights.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel taps must be odd, got {kh}x{kw}", "weights")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("bias does not match output channels", (self.weights.shape[0],), self.bias.shape)
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}", "dilation")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}", "stride")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> Tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    @property
    def taps(self) -> int:
        kh, kw = self.kernel_size
        return kh * kw


def init_conv_params(out_c: int, in_c: int, kernel: int, rng: np.random.Generator,
                     dilation: int = 1, stride: int = 1, dtype=DEFAULT_DTYPE) -> ConvParams:
    """Centered uniform init with scale 1/sqrt(fan_in), zero bias"""
    fan_in = in_c * kernel * kernel
    bound = 1.0 / np.sqrt(fan_in)
    weights = rng.uniform(-bound, bound, size=(out_c, in_c, kernel, kernel)).astype(dtype)
    return ConvParams(weights, np.zeros(out_c, dtype=dtype), dilation=dilation, stride=stride)


def regular_grid(kh: int, kw: int, dilation: int = 1) -> np.ndarray:
    """Tap positions (dy, dx) of a centered kh x kw grid, row-major, shape (K, 2)"""
    rows = (np.arange(kh) - kh // 2) * dilation
    cols = (np.arange(kw) - kw // 2) * dilation
    dy, dx = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1).astype(np.float64)


def _check_tensor4(x: np.ndarray, name: str = "x"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        shape = getattr(x, "shape", None)
        raise ShapeError(f"{name} must be a 4-D array", "(n, c, h, w)", shape)


def _check_conv_input(x: np.ndarray, p: ConvParams):
    _check_tensor4(x)
    if x.shape[1] != p.in_channels:
        raise ShapeError("input channels do not match conv weights",
                         f"(n, {p.in_channels}, h, w) for weights {p.weights.shape}", x.shape)


def _output_size(size: int, stride: int) -> int:
    return (size - 1) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, dilation: int, stride: int) -> np.ndarray:
    """Gather conv taps into (n, c, kh, kw, out_h, out_w)"""
    n, c, h, w = x.shape
    pad_h = dilation * (kh - 1) // 2
    pad_w = dilation * (kw - 1) // 2
    out_h, out_w = _output_size(h, stride), _output_size(w, stride)
    padded = np.pad(x, [(0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)], "constant")

    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=x.dtype)
    for i in range(kh):
        y0 = i * dilation
        y1 = y0 + stride * (out_h - 1) + 1
        for j in range(kw):
            x0 = j * dilation
            x1 = x0 + stride * (out_w - 1) + 1
            cols[:, :, i, j] = padded[:, :, y0:y1:stride, x0:x1:stride]
    return cols


def _col2im(cols: np.ndarray, x_shape: Tuple[int, ...], dilation: int, stride: int) -> np.ndarray:
    """Scatter-add (n, c, kh, kw, out_h, out_w) back onto the input grid"""
    n, c, h, w = x_shape
    kh, kw, out_h, out_w = cols.shape[2:]
    pad_h = dilation * (kh - 1) // 2
    pad_w = dilation * (kw - 1) // 2

    padded = np.zeros((n, c, h + 2 * pad_h, w + 2 * pad_w), dtype=cols.dtype)
    for i in range(kh):
        y0 = i * dilation
        y1 = y0 + stride * (out_h - 1) + 1
        for j in range(kw):
            x0 = j * dilation
            x1 = x0 + stride * (out_w - 1) + 1
            padded[:, :, y0:y1:stride, x0:x1:stride] += cols[:, :, i, j]
    return padded[:, :, pad_h:pad_h + h, pad_w:pad_w + w]


def _apply_weights(p: ConvParams, cols: np.ndarray) -> np.ndarray:
    """Flattened weights times columns: (c*K, m) -> (out_c, m)"""
    return p.weights.reshape(p.out_channels, -1).astype(cols.dtype) @ cols


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Standard (optionally dilated and strided) convolution with same padding"""
    _check_conv_input(x, p)
    n = x.shape[0]
    kh, kw = p.kernel_size

    cols = _im2col(x, kh, kw, p.dilation, p.stride)
    out_h, out_w = cols.shape[4:]
    cols2d = cols.transpose(1, 2, 3, 0, 4, 5).reshape(p.in_channels * kh * kw, -1)

    y = _apply_weights(p, cols2d).reshape(p.out_channels, n, out_h, out_w).transpose(1, 0, 2, 3)
    return y + p.bias.astype(x.dtype)[None, :, None, None]


def conv2d_backward(grad_y: np.ndarray, x: np.ndarray,
                    p: ConvParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of <grad_y, conv2d(x, p)> with respect to x, weights and bias"""
    _check_conv_input(x, p)
    n = x.shape[0]
    kh, kw = p.kernel_size
    expected = (n, p.out_channels, _output_size(x.shape[2], p.stride), _output_size(x.shape[3], p.stride))
    if grad_y.shape != expected:
        raise ShapeError("grad_y does not match conv2d output", expected, grad_y.shape)

    cols = _im2col(x, kh, kw, p.dilation, p.stride)
    cols2d = cols.transpose(1, 2, 3, 0, 4, 5).reshape(p.in_channels * kh * kw, -1)
    gy2d = grad_y.transpose(1, 0, 2, 3).reshape(p.out_channels, -1)

    grad_w = (gy2d @ cols2d.T).reshape(p.weights.shape)
    grad_b = grad_y.sum(axis=(0, 2, 3))

    w2d = p.weights.reshape(p.out_channels, -1).astype(x.dtype)
    grad_cols = (w2d.T @ gy2d).reshape(p.in_channels, kh, kw, n, expected[2], expected[3])
    grad_x = _col2im(grad_cols.transpose(3, 0, 1, 2, 4, 5), x.shape, p.dilation, p.stride)
    return grad_x, grad_w.astype(x.dtype), grad_b.astype(x.dtype)


def _bilinear_corners(ys: np.ndarray, xs: np.ndarray, h: int, w: int):
    """Four (row, col, weight) corner triples; out-of-bounds corners get weight zero"""
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    ly = ys - y0
    lx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)

    corners = []
    for dy, wy in ((0, 1.0 - ly), (1, ly)):
        for dx, wx in ((0, 1.0 - lx), (1, lx)):
            yi = y0 + dy
            xi = x0 + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            corners.append((np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1), wy * wx * valid))
    return corners


def bilinear_sample(x: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample x (n, c, h, w) at fractional (ys, xs) of any common shape S -> (n, c, *S)"""
    _check_tensor4(x)
    if ys.shape != xs.shape:
        raise ShapeError("sample coordinate arrays differ", ys.shape, xs.shape)
    h, w = x.shape[2:]
    out = np.zeros(x.shape[:2] + ys.shape, dtype=x.dtype)
    for yi, xi, weight in _bilinear_corners(ys, xs, h, w):
        out += x[:, :, yi, xi] * weight.astype(x.dtype)
    return out


def _check_offsets(x: np.ndarray, p: ConvParams, o: np.ndarray):
    _check_conv_input(x, p)
    h, w = x.shape[2:]
    if o.ndim != 4 or o.shape[3] != 2 or o.shape[:2] != (h, w):
        raise ShapeError("offset field does not match feature map", (h, w, p.taps, 2), o.shape)
    if o.shape[2] != p.taps:
        raise ShapeError("offset field tap count does not match kernel", (h, w, p.taps, 2), o.shape)
    if p.stride != 1:
        raise ConfigError("adaptive convolution requires stride 1", "stride")


def _sampling_positions(x: np.ndarray, p: ConvParams, o: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Absolute tap coordinates p + dilation*r_k + o_k, each (h, w, K)"""
    h, w = x.shape[2:]
    grid = regular_grid(*p.kernel_size, p.dilation)
    iy, ix = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ys = iy[:, :, None] + grid[None, None, :, 0] + o[..., 0]
    xs = ix[:, :, None] + grid[None, None, :, 1] + o[..., 1]
    return ys, xs


def adaptive_conv(x: np.ndarray, p: ConvParams, o: np.ndarray) -> np.ndarray:
    """
    Convolution whose taps are displaced by a per-location offset field.

    `o` has shape (h, w, K, 2) holding (dy, dx) relative to the regular grid of
    `p.dilation`; all-zero offsets reduce to conv2d with that dilation.
    """
    _check_offsets(x, p, o)
    n, c, h, w = x.shape

    ys, xs = _sampling_positions(x, p, o)
    samples = bilinear_sample(x, ys, xs)  # (n, c, h, w, K)
    cols2d = samples.transpose(1, 4, 0, 2, 3).reshape(c * p.taps, -1)

    y = _apply_weights(p, cols2d).reshape(p.out_channels, n, h, w).transpose(1, 0, 2, 3)
    return y + p.bias.astype(x.dtype)[None, :, None, None]


def adaptive_conv_backward(grad_y: np.ndarray, x: np.ndarray, p: ConvParams,
                           o: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients with respect to x, weights and bias; offsets are constants"""
    _check_offsets(x, p, o)
    n, c, h, w = x.shape
    if grad_y.shape != (n, p.out_channels, h, w):
        raise ShapeError("grad_y does not match adaptive_conv output", (n, p.out_channels, h, w), grad_y.shape)

    ys, xs = _sampling_positions(x, p, o)
    corners = _bilinear_corners(ys, xs, h, w)

    samples = np.zeros((n, c) + ys.shape, dtype=x.dtype)
    for yi, xi, weight in corners:
        samples += x[:, :, yi, xi] * weight.astype(x.dtype)
    cols2d = samples.transpose(1, 4, 0, 2, 3).reshape(c * p.taps, -1)
    gy2d = grad_y.transpose(1, 0, 2, 3).reshape(p.out_channels, -1)

    grad_w = (gy2d @ cols2d.T).reshape(p.weights.shape)
    grad_b = grad_y.sum(axis=(0, 2, 3))

    w2d = p.weights.reshape(p.out_channels, -1).astype(x.dtype)
    grad_cols = (w2d.T @ gy2d).reshape(c, p.taps, n, h, w).transpose(2, 0, 3, 4, 1)  # (n, c, h, w, K)

    # fixed-order scatter: one bincount over all four corners
    rows = np.arange(n * c)[:, None]
    indices, values = [], []
    for yi, xi, weight in corners:
        flat = (yi * w + xi).ravel()
        indices.append((rows * (h * w) + flat[None, :]).ravel())
        values.append((grad_cols.reshape(n * c, -1) * weight.ravel()[None, :]).ravel())
    grad_x = np.bincount(np.concatenate(indices), weights=np.concatenate(values), minlength=n * c * h * w)
    return grad_x.reshape(x.shape).astype(x.dtype), grad_w.astype(x.dtype), grad_b.astype(x.dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_y: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient through relu given its output y"""
    return grad_y * (y > 0)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float, momentum: float,
             buffers: Sequence[np.ndarray], weight_decay: float = 0.0) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """
    One momentum SGD step: v <- momentum*v + g (+ weight_decay*p); p <- p - lr*v.

    Returns new parameter and buffer lists; inputs are left untouched.
    """
    if not (len(params) == len(grads) == len(buffers)):
        raise ShapeError("params, grads and buffers differ in length",
                         len(params), (len(grads), len(buffers)))
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}", "lr")
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must be in [0, 1), got {momentum}", "momentum")

    new_params, new_buffers = [], []
    for param, grad, buf in zip(params, grads, buffers):
        if param.shape != grad.shape or param.shape != buf.shape:
            raise ShapeError("parameter/gradient/buffer shapes differ", param.shape, (grad.shape, buf.shape))
        step = grad + weight_decay * param if weight_decay else grad
        velocity = (momentum * buf + step).astype(param.dtype)
        new_params.append((param - lr * velocity).astype(param.dtype))
        new_buffers.append(velocity)
    return new_params, new_buffers
