"""Layer primitives on dense NHWC arrays.

Tensors are plain C-ordered ``numpy.ndarray`` objects, so element ``(i, j, c)``
of an ``H x W x C`` map lives at ``data[(i * W + j) * C + c]``. Every function
accepts a single map ``(H, W, C)`` or a batch ``(N, H, W, C)`` and returns the
same rank it was given.

Convolutions use the cross-correlation convention (no kernel flip). Weight
layouts follow the usual channels-last convention:

* ``conv2d``: ``(kh, kw, in_channels, out_channels)``
* ``tconv2d``: ``(kh, kw, out_channels, in_channels)``

With that layout the transposed convolution is exactly the adjoint of the
convolution that shares its weight array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SAME = "same"
VALID = "valid"


class ShapeError(ValueError):
    """Raised when tensor extents do not fit an operation."""


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride_h: int = 1
    stride_w: int = 1
    padding: str = VALID
    output_padding: int = 0

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "in_channels", "out_channels", "stride_h", "stride_w"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding not in (SAME, VALID):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.output_padding < 0:
            raise ValueError("output_padding must be non-negative")
        if self.output_padding >= max(self.stride_h, self.stride_w):
            raise ValueError("output_padding must be smaller than the stride")

    @property
    def conv_weight_shape(self) -> tuple[int, int, int, int]:
        return (self.kernel_h, self.kernel_w, self.in_channels, self.out_channels)

    @property
    def tconv_weight_shape(self) -> tuple[int, int, int, int]:
        return (self.kernel_h, self.kernel_w, self.out_channels, self.in_channels)

    def conv_output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            _conv_out_dim(h, self.kernel_h, self.stride_h, self.padding, "height"),
            _conv_out_dim(w, self.kernel_w, self.stride_w, self.padding, "width"),
        )

    def tconv_output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.padding != VALID:
            raise ValueError("transposed convolution supports only 'valid' padding")
        return (
            (h - 1) * self.stride_h + self.kernel_h + self.output_padding,
            (w - 1) * self.stride_w + self.kernel_w + self.output_padding,
        )


def _conv_out_dim(n: int, k: int, s: int, padding: str, axis: str) -> int:
    if padding == SAME:
        return math.ceil(n / s)
    out = (n - k) // s + 1 if n >= k else 0
    if out < 1:
        raise ShapeError(f"valid convolution leaves no output along {axis}: input {n}, kernel {k}")
    return out


def same_padding(n: int, k: int, s: int) -> tuple[int, int]:
    """(before, after) padding for SAME; odd overhang goes to the bottom/right."""
    out = math.ceil(n / s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def _as_batch(x: np.ndarray, name: str = "input") -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name} must have shape (H, W, C) or (N, H, W, C), got {x.shape}")


def _unbatch(x: np.ndarray, single: bool) -> np.ndarray:
    return x[0] if single else x


def _check_params(weights: np.ndarray, bias: np.ndarray | None, expected: tuple, channels_out: int):
    if weights.shape != expected:
        for axis, (got, want) in enumerate(zip(weights.shape, expected)):
            if got != want:
                raise ShapeError(f"weights axis {axis} has extent {got}, expected {want} (shape {weights.shape} vs {expected})")
        raise ShapeError(f"weights have shape {weights.shape}, expected {expected}")
    if bias is not None and bias.shape != (channels_out,):
        raise ShapeError(f"bias has shape {bias.shape}, expected ({channels_out},)")


def _check_channels(x: np.ndarray, want: int, what: str = "input"):
    if x.shape[-1] != want:
        raise ShapeError(f"{what} channel dimension is {x.shape[-1]}, expected {want}")


def _taps(x: np.ndarray, a: int, b: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Strided view of ``x`` seen by kernel tap (a, b)."""
    return x[:, a : a + sh * (ho - 1) + 1 : sh, b : b + sw * (wo - 1) + 1 : sw, :]


def _pad_input(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    if spec.padding == VALID:
        return x, (0, 0, 0, 0)
    top, bottom = same_padding(x.shape[1], spec.kernel_h, spec.stride_h)
    left, right = same_padding(x.shape[2], spec.kernel_w, spec.stride_w)
    if top == bottom == left == right == 0:
        return x, (0, 0, 0, 0)
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0))), (top, bottom, left, right)


def _flat_taps(kh: int, kw: int, frame_w: int) -> list[tuple[int, int, int]]:
    return [(a, b, a * frame_w + b) for a in range(kh) for b in range(kw)]


# Stride-1 kernels run on one sample at a time over the flattened padded frame:
# output pixel (i, j) is stored at virtual row i * Wp + j, so every kernel tap
# reads one contiguous slice of the frame and no patch matrix is materialised.
# Virtual rows with j >= wo are scratch and get discarded. Layers with very
# few channels make those per-tap matmuls too thin, so they gather an explicit
# patch matrix per sample instead.

_THIN = 16


def _thin(cin: int, cout: int) -> bool:
    return cin < _THIN


def _patches(xp_i: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    cin = xp_i.shape[-1]
    cols = np.empty((ho, wo, kh, kw, cin), dtype=xp_i.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, a, b] = xp_i[a : a + ho, b : b + wo]
    return cols.reshape(ho * wo, kh * kw * cin)


def _correlate(xp: np.ndarray, weights: np.ndarray, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Sum over taps of ``x_tap @ weights[a, b]``; ``weights`` is (kh, kw, Cin, Cout)."""
    n, hp, wp, cin = xp.shape
    kh, kw, _, cout = weights.shape
    dtype = np.result_type(xp, weights)
    if sh != 1 or sw != 1:
        out = np.zeros((n * ho * wo, cout), dtype=dtype)
        for a in range(kh):
            for b in range(kw):
                out += _taps(xp, a, b, sh, sw, ho, wo).reshape(-1, cin) @ weights[a, b]
        return out.reshape(n, ho, wo, cout)
    out = np.empty((n, ho, wo, cout), dtype=dtype)
    if _thin(cin, cout):
        w2 = weights.reshape(-1, cout)
        for i in range(n):
            out[i] = (_patches(xp[i], kh, kw, ho, wo) @ w2).reshape(ho, wo, cout)
        return out
    span = (ho - 1) * wp + wo
    acc = np.empty((ho * wp, cout), dtype=dtype)
    for i in range(n):
        flat = np.ascontiguousarray(xp[i]).reshape(hp * wp, cin)
        acc[:] = 0
        for a, b, off in _flat_taps(kh, kw, wp):
            acc[:span] += flat[off : off + span] @ weights[a, b]
        out[i] = acc.reshape(ho, wp, cout)[:, :wo]
    return out


def _virtual_grad(grad_i: np.ndarray, wp: int) -> np.ndarray:
    ho, wo, c = grad_i.shape
    buf = np.zeros((ho, wp, c), dtype=grad_i.dtype)
    buf[:, :wo] = grad_i
    return buf.reshape(ho * wp, c)[: (ho - 1) * wp + wo]


def _correlate_weight_grad(xp: np.ndarray, grad: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """d/dW of ``_correlate``: result[a, b] = x_tap^T @ grad, shape (kh, kw, Cin, Cout)."""
    n, ho, wo, cout = grad.shape
    _, hp, wp, cin = xp.shape
    out = np.zeros((kh, kw, cin, cout), dtype=np.result_type(xp, grad))
    if sh != 1 or sw != 1:
        g = grad.reshape(-1, cout)
        for a in range(kh):
            for b in range(kw):
                out[a, b] = _taps(xp, a, b, sh, sw, ho, wo).reshape(-1, cin).T @ g
        return out
    if _thin(cin, cout):
        w2 = out.reshape(-1, cout)
        for i in range(n):
            w2 += _patches(xp[i], kh, kw, ho, wo).T @ grad[i].reshape(-1, cout)
        return out
    for i in range(n):
        flat = np.ascontiguousarray(xp[i]).reshape(hp * wp, cin)
        g = _virtual_grad(grad[i], wp)
        span = g.shape[0]
        for a, b, off in _flat_taps(kh, kw, wp):
            out[a, b] += flat[off : off + span].T @ g
    return out


def _scatter(grad: np.ndarray, weights: np.ndarray, out_shape: tuple, sh: int, sw: int) -> np.ndarray:
    """Adjoint of ``_correlate``: distribute ``grad @ weights[a, b].T`` back onto taps."""
    n, ho, wo, cout = grad.shape
    kh, kw, cin, _ = weights.shape
    out = np.zeros(out_shape, dtype=np.result_type(grad, weights))
    if sh != 1 or sw != 1:
        g = grad.reshape(-1, cout)
        for a in range(kh):
            for b in range(kw):
                _taps(out, a, b, sh, sw, ho, wo)[...] += (g @ weights[a, b].T).reshape(n, ho, wo, cin)
        return out
    _, hp, wp, _ = out_shape
    if _thin(cin, cout):
        w2t = weights.reshape(-1, cout).T
        for i in range(n):
            cols = (grad[i].reshape(-1, cout) @ w2t).reshape(ho, wo, kh, kw, cin)
            for a in range(kh):
                for b in range(kw):
                    out[i, a : a + ho, b : b + wo] += cols[:, :, a, b]
        return out
    for i in range(n):
        g = _virtual_grad(grad[i], wp)
        span = g.shape[0]
        flat = out[i].reshape(hp * wp, cin)
        for a, b, off in _flat_taps(kh, kw, wp):
            flat[off : off + span] += g @ weights[a, b].T
    return out


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, spec: ConvSpec) -> np.ndarray:
    xb, single = _as_batch(x)
    _check_params(weights, bias, spec.conv_weight_shape, spec.out_channels)
    _check_channels(xb, spec.in_channels)
    ho, wo = spec.conv_output_hw(xb.shape[1], xb.shape[2])
    xp, _ = _pad_input(xb, spec)
    out = _correlate(xp, weights, spec.stride_h, spec.stride_w, ho, wo)
    out += bias
    return _unbatch(out, single)


def conv2d_backward(grad_out, cached_input, weights, spec: ConvSpec):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    xb, single = _as_batch(cached_input, "cached_input")
    gb, _ = _as_batch(grad_out, "grad_out")
    _check_params(weights, None, spec.conv_weight_shape, spec.out_channels)
    _check_channels(xb, spec.in_channels)
    ho, wo = spec.conv_output_hw(xb.shape[1], xb.shape[2])
    expected = (xb.shape[0], ho, wo, spec.out_channels)
    if gb.shape != expected:
        raise ShapeError(f"grad_out has shape {gb.shape}, forward output was {expected}")
    xp, (top, _, left, _) = _pad_input(xb, spec)
    gw = _correlate_weight_grad(xp, gb, spec.kernel_h, spec.kernel_w, spec.stride_h, spec.stride_w)
    gbias = gb.sum(axis=(0, 1, 2))
    gxp = _scatter(gb, weights, xp.shape, spec.stride_h, spec.stride_w)
    gx = gxp[:, top : top + xb.shape[1], left : left + xb.shape[2], :]
    return _unbatch(np.ascontiguousarray(gx), single), gw, gbias


def tconv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, spec: ConvSpec) -> np.ndarray:
    xb, single = _as_batch(x)
    _check_params(weights, bias, spec.tconv_weight_shape, spec.out_channels)
    _check_channels(xb, spec.in_channels)
    n, h, w, _ = xb.shape
    oh, ow = spec.tconv_output_hw(h, w)
    # a transposed conv scatters with the (Cout, Cin) slices of its weights,
    # i.e. it is the adjoint of a conv whose weights are (kh, kw, Cout, Cin)
    out = _scatter(xb, weights, (n, oh, ow, spec.out_channels), spec.stride_h, spec.stride_w)
    out += bias
    return _unbatch(out, single)


def tconv2d_backward(grad_out, cached_input, weights, spec: ConvSpec):
    """Returns ``(grad_input, grad_weights, grad_bias)``.

    The input gradient is a plain strided valid convolution of ``grad_out``
    with the same weights.
    """
    xb, single = _as_batch(cached_input, "cached_input")
    gb, _ = _as_batch(grad_out, "grad_out")
    _check_params(weights, None, spec.tconv_weight_shape, spec.out_channels)
    _check_channels(xb, spec.in_channels)
    n, h, w, _ = xb.shape
    oh, ow = spec.tconv_output_hw(h, w)
    if gb.shape != (n, oh, ow, spec.out_channels):
        raise ShapeError(f"grad_out has shape {gb.shape}, forward output was {(n, oh, ow, spec.out_channels)}")
    gx = _correlate(gb, weights, spec.stride_h, spec.stride_w, h, w)
    gw = _correlate_weight_grad(gb, xb, spec.kernel_h, spec.kernel_w, spec.stride_h, spec.stride_w)
    gbias = gb.sum(axis=(0, 1, 2))
    return _unbatch(gx, single), gw, gbias


def maxpool_forward(x: np.ndarray, pool: int = 4, stride: int = 4):
    """Disjoint max pooling.

    Returns ``(output, argmax)`` where ``argmax`` holds, per output cell, the
    flat index into ``x`` of the selected element. Ties go to the lowest flat
    index.
    """
    if pool != stride:
        raise ValueError("only disjoint pooling (pool == stride) is supported")
    xb, single = _as_batch(x)
    n, h, w, c = xb.shape
    if h % stride or w % stride:
        raise ShapeError(f"spatial extents ({h}, {w}) are not divisible by pool stride {stride}")
    ho, wo = h // stride, w // stride
    windows = xb.reshape(n, ho, stride, wo, stride, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, stride * stride)
    local = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, stride)
    ni = np.arange(n)[:, None, None, None]
    ii = np.arange(ho)[None, :, None, None] * stride + di
    jj = np.arange(wo)[None, None, :, None] * stride + dj
    cc = np.arange(c)[None, None, None, :]
    flat = ((ni * h + ii) * w + jj) * c + cc
    return _unbatch(out, single), _unbatch(flat, single)


def maxpool_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape) -> np.ndarray:
    grad_out = np.asarray(grad_out)
    argmax = np.asarray(argmax)
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match argmax shape {argmax.shape}")
    size = math.prod(input_shape)
    if argmax.size and (argmax.min() < 0 or argmax.max() >= size):
        raise IndexError(f"argmax index out of range for input of shape {tuple(input_shape)}; cache is corrupted")
    grad_in = np.zeros(size, dtype=grad_out.dtype)
    # windows are disjoint, so every index appears at most once
    grad_in[argmax.ravel()] = grad_out.ravel()
    return grad_in.reshape(input_shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, cached_input: np.ndarray) -> np.ndarray:
    return np.where(cached_input > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def prelu(x: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    _check_channels(x, slopes.shape[0])
    return np.where(x >= 0, x, x * slopes)


def prelu_backward(grad_out: np.ndarray, cached_input: np.ndarray, slopes: np.ndarray):
    """Returns ``(grad_input, grad_slopes)``."""
    neg = cached_input < 0
    grad_in = np.where(neg, grad_out * slopes, grad_out)
    axes = tuple(range(cached_input.ndim - 1))
    grad_slopes = np.where(neg, grad_out * cached_input, 0).sum(axis=axes)
    return grad_in, grad_slopes
