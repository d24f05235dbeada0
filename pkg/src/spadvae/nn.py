"""Dense layer primitives with analytic backward passes.

Public functions take and return plain ``numpy.ndarray`` in NCHW layout.
Internally convolutions run on channel-major ``[C, N, H, W]`` arrays (the
``*_cn`` functions), which lets im2col patches and matrix products line up
without transposing copies; the VAE calls those directly.

Convolutions are lowered to one matrix product and scattered back with a
fixed loop over kernel offsets, so results are reproducible run to run.

Weight layouts:

* ``conv2d``:            ``[C_out, C_in, k, k]``
* ``conv2d_transposed``: ``[C_in, C_out, k, k]``
* ``fully_connected``:   ``[F_out, F_in]``
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "ConvSpec",
    "conv_output_extent",
    "conv_transposed_output_extent",
    "conv2d_forward",
    "conv2d_backward",
    "conv2d_transposed_forward",
    "conv2d_transposed_backward",
    "fully_connected",
    "fully_connected_backward",
    "leaky_relu",
    "leaky_relu_backward",
    "sigmoid",
    "sigmoid_backward",
]


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 4
    stride: int = 2
    padding: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError("kernel and stride must be positive, padding non-negative")


def conv_output_extent(n, kernel, stride, padding, dim="extent"):
    span = n + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"{dim} {n} is incompatible with kernel={kernel}, stride={stride}, "
            f"padding={padding}: (n + 2*pad - k) must be a non-negative multiple of stride",
            dim=dim,
        )
    return span // stride + 1


def conv_transposed_output_extent(n, kernel, stride, padding, dim="extent"):
    out = (n - 1) * stride + kernel - 2 * padding
    if out < 1:
        raise ShapeError(f"{dim} {n} gives an empty transposed-conv output", dim=dim)
    return out


def _check_rank(x, rank, name):
    if x.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {x.shape}", dim="rank")


def _check_weight(weight, bias, spec, transposed):
    _check_rank(weight, 4, "weight")
    if transposed:
        c_in, c_out = weight.shape[0], weight.shape[1]
    else:
        c_out, c_in = weight.shape[0], weight.shape[1]
    if (c_in, c_out) != (spec.in_channels, spec.out_channels):
        raise ShapeError(
            f"weight channels ({c_in} in, {c_out} out) disagree with spec "
            f"({spec.in_channels} in, {spec.out_channels} out)",
            dim="channels",
        )
    if weight.shape[2:] != (spec.kernel, spec.kernel):
        raise ShapeError(f"weight kernel {weight.shape[2:]} != {spec.kernel}", dim="kernel")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)", dim="bias")


def _check_input_cn(x, spec):
    _check_rank(x, 4, "input")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(
            f"input has {x.shape[0]} channels, expected {spec.in_channels}", dim="channels"
        )


def _im2col_cn(x, k, s, p):
    """``[C, N, H, W]`` -> patch matrix ``[C*k*k, N*Ho*Wo]`` plus ``(Ho, Wo)``."""
    c, n, h, w = x.shape
    ho = conv_output_extent(h, k, s, p, "height")
    wo = conv_output_extent(w, k, s, p, "width")
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    # win: [C, N, Ho, Wo, k, k]
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(c * k * k, n * ho * wo)
    return cols, ho, wo


def _col2im_cn(cols, c, n, h, w, ho, wo, k, s, p):
    """Scatter-add ``[C*k*k, N*Ho*Wo]`` patches into a ``[C, N, h, w]`` image.

    ``h``/``w`` are the unpadded extents.  Accumulation order is fixed:
    kernel rows, then kernel columns.
    """
    cols = cols.reshape(c, k, k, n, ho, wo)
    hp, wp = h + 2 * p, w + 2 * p
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(k):
        hi = i + s * ho
        for j in range(k):
            out[:, :, i:hi:s, j : j + s * wo : s] += cols[:, i, j]
    if p:
        out = out[:, :, p : hp - p, p : wp - p]
    return out


def conv2d_forward_cn(x, weight, bias, spec):
    _check_input_cn(x, spec)
    _check_weight(weight, bias, spec, transposed=False)
    n = x.shape[1]
    cols, ho, wo = _im2col_cn(x, spec.kernel, spec.stride, spec.padding)
    out = weight.reshape(spec.out_channels, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    return out.reshape(spec.out_channels, n, ho, wo)


def conv2d_backward_cn(grad_out, x, weight, spec, input_grad=True):
    c, n, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    cols, ho, wo = _im2col_cn(x, k, s, p)
    if grad_out.shape != (spec.out_channels, n, ho, wo):
        raise ShapeError(
            f"upstream gradient shape {grad_out.shape} != {(spec.out_channels, n, ho, wo)}",
            dim="grad_out",
        )
    g = grad_out.reshape(spec.out_channels, -1)
    w_mat = weight.reshape(spec.out_channels, -1)
    d_weight = (g @ cols.T).reshape(weight.shape)
    d_bias = g.sum(axis=1)
    d_x = _col2im_cn(w_mat.T @ g, c, n, h, w, ho, wo, k, s, p) if input_grad else None
    return d_x, d_weight, d_bias


def conv2d_transposed_forward_cn(x, weight, bias, spec):
    _check_input_cn(x, spec)
    _check_weight(weight, bias, spec, transposed=True)
    c_in, n, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    ho = conv_transposed_output_extent(h, k, s, p, "height")
    wo = conv_transposed_output_extent(w, k, s, p, "width")
    cols = weight.reshape(c_in, -1).T @ x.reshape(c_in, -1)
    out = _col2im_cn(cols, spec.out_channels, n, ho, wo, h, w, k, s, p)
    if bias is not None:
        out += bias[:, None, None, None]
    return out


def conv2d_transposed_backward_cn(grad_out, x, weight, spec):
    c_in, n, h, w = x.shape
    cols, gh, gw = _im2col_cn(grad_out, spec.kernel, spec.stride, spec.padding)
    if grad_out.shape[:2] != (spec.out_channels, n) or (gh, gw) != (h, w):
        raise ShapeError(
            f"upstream gradient shape {grad_out.shape} does not match input {x.shape}",
            dim="grad_out",
        )
    x_mat = x.reshape(c_in, -1)
    d_weight = (x_mat @ cols.T).reshape(weight.shape)
    d_x = (weight.reshape(c_in, -1) @ cols).reshape(c_in, n, h, w)
    d_bias = grad_out.sum(axis=(1, 2, 3))
    return d_x, d_weight, d_bias


def _cn(x):
    return np.ascontiguousarray(np.swapaxes(x, 0, 1))


def conv2d_forward(x, weight, bias, spec):
    """Cross-correlate ``x`` ``[N, C, H, W]`` with ``weight`` and add ``bias``."""
    _check_rank(x, 4, "input")
    return _cn(conv2d_forward_cn(_cn(x), weight, bias, spec))


def conv2d_backward(grad_out, x, weight, spec, input_grad=True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weight and bias.

    With ``input_grad=False`` the input gradient is skipped and returned as None.
    """
    d_x, d_w, d_b = conv2d_backward_cn(_cn(grad_out), _cn(x), weight, spec, input_grad)
    return (None if d_x is None else _cn(d_x)), d_w, d_b


def conv2d_transposed_forward(x, weight, bias, spec):
    """Transposed convolution (the input-gradient map of a convolution), plus bias."""
    _check_rank(x, 4, "input")
    return _cn(conv2d_transposed_forward_cn(_cn(x), weight, bias, spec))


def conv2d_transposed_backward(grad_out, x, weight, spec):
    d_x, d_w, d_b = conv2d_transposed_backward_cn(_cn(grad_out), _cn(x), weight, spec)
    return _cn(d_x), d_w, d_b


def fully_connected(x, weight, bias):
    """``x @ weight.T + bias`` for ``x`` of shape ``[N, F_in]``."""
    _check_rank(x, 2, "input")
    _check_rank(weight, 2, "weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input features {x.shape[1]} != weight inner dim {weight.shape[1]}", dim="features"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)", dim="bias")
    return x @ weight.T + bias


def fully_connected_backward(grad_out, x, weight):
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def leaky_relu(x, slope=0.01):
    return np.where(x >= 0, x, x * slope)


def leaky_relu_backward(grad_out, x, slope=0.01):
    return np.where(x >= 0, grad_out, grad_out * slope)


def sigmoid(x):
    """Logistic function, evaluated without overflow and kept strictly inside (0, 1)."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    ftype = x.dtype.type
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(ftype, copy=False)
    # 1/(1+e) rounds to exactly 1 for x >~ 37 (float64); keep the open interval.
    return np.clip(out, np.finfo(ftype).tiny, np.nextafter(ftype(1), ftype(0)))


def sigmoid_backward(grad_out, y):
    """Gradient through a sigmoid given its output ``y``."""
    return grad_out * y * (1.0 - y)
