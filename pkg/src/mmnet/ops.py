"""Forward implementations of the neural operators used by the network.

All ops are pure functions of their inputs and preserve the input dtype,
so the same code path serves the float32 engine and the float64
finite-difference checks. ``naive_conv2d`` is the literal nested-loop
convolution used as a semantic oracle in tests; ``conv2d`` is the
vectorized implementation that must match it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .tensor import check_nchw, pad_zero

ALLOWED_STRIDES = (1, 2)
ALLOWED_DILATIONS = (1, 2, 4, 8)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a convolution: kernel taps, stride, dilation, grouping.

    groups is either 1 (standard convolution) or equal to the input channel
    count (depthwise). Padding is always "same" for the given stride, i.e.
    output spatial size is ceil(input / stride).
    """

    kernel_h: int
    kernel_w: int
    stride: int = 1
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.stride not in ALLOWED_STRIDES:
            raise ValueError(f"stride must be one of {ALLOWED_STRIDES}")
        if self.dilation not in ALLOWED_DILATIONS:
            raise ValueError(f"dilation must be one of {ALLOWED_DILATIONS}")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel extents must be >= 1")


@dataclass
class BatchNormParams:
    """Per-channel affine normalization parameters."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        c = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != c:
                raise ValueError(f"{name} length != channel count {c}")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be >= 0")


def same_padding(
    in_h: int, in_w: int, spec: ConvSpec
) -> Tuple[int, int, int, int]:
    """(top, bottom, left, right) zero padding giving output ceil(in/stride)."""

    def axis(size, k):
        eff = spec.dilation * (k - 1) + 1
        out = -(-size // spec.stride)  # ceil division
        total = max((out - 1) * spec.stride + eff - size, 0)
        return total // 2, total - total // 2

    top, bottom = axis(in_h, spec.kernel_h)
    left, right = axis(in_w, spec.kernel_w)
    return top, bottom, left, right


def conv_output_size(in_h: int, in_w: int, spec: ConvSpec) -> Tuple[int, int]:
    return -(-in_h // spec.stride), -(-in_w // spec.stride)


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    check_nchw(x, "conv input")
    if w.ndim != 4:
        raise ValueError("conv weights must be 4-D (c_out, c_in/groups, kh, kw)")
    cin = x.shape[1]
    if spec.groups == 1:
        if w.shape[1] != cin:
            raise ValueError(f"weight c_in {w.shape[1]} != input channels {cin}")
    elif spec.groups == cin:
        if w.shape[1] != 1 or w.shape[0] != cin:
            raise ValueError(
                f"depthwise weights must be (c_in, 1, kh, kw), got {w.shape}"
            )
    else:
        raise ValueError(f"groups must be 1 or c_in={cin}, got {spec.groups}")
    if w.shape[2] != spec.kernel_h or w.shape[3] != spec.kernel_w:
        raise ValueError(f"weight taps {w.shape[2:]} != spec kernel")


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    bias: Optional[np.ndarray] = None,
    spec: ConvSpec = ConvSpec(3, 3),
) -> np.ndarray:
    """Direct 2-D convolution (cross-correlation) with "same" padding.

    Vectorized as a sum over kernel taps of strided slices; semantics are
    defined by (and tested against) naive_conv2d.
    """
    _check_conv_shapes(x, w, spec)
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    pt, pb, pl, pr = same_padding(h, wd, spec)
    oh, ow = conv_output_size(h, wd, spec)
    xp = pad_zero(x, pt, pb, pl, pr)
    s, d = spec.stride, spec.dilation
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            xs = xp[
                :,
                :,
                i * d : i * d + (oh - 1) * s + 1 : s,
                j * d : j * d + (ow - 1) * s + 1 : s,
            ]
            if spec.groups == 1:
                out += np.einsum("nchw,oc->nohw", xs, w[:, :, i, j])
            else:
                out += xs * w[:, 0, i, j][None, :, None, None]
    if bias is not None:
        out += np.asarray(bias, dtype=x.dtype)[None, :, None, None]
    return out


def naive_conv2d(
    x: np.ndarray,
    w: np.ndarray,
    bias: Optional[np.ndarray] = None,
    spec: ConvSpec = ConvSpec(3, 3),
) -> np.ndarray:
    """Literal six-loop convolution. Test oracle; deliberately unoptimized."""
    _check_conv_shapes(x, w, spec)
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    pt, pb, pl, pr = same_padding(h, wd, spec)
    oh, ow = conv_output_size(h, wd, spec)
    xp = pad_zero(x, pt, pb, pl, pr)
    s, d = spec.stride, spec.dilation
    depthwise = spec.groups != 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for b in range(n):
        for o in range(cout):
            for y in range(oh):
                for xo in range(ow):
                    acc = 0.0
                    for i in range(spec.kernel_h):
                        for j in range(spec.kernel_w):
                            iy = y * s + i * d
                            ix = xo * s + j * d
                            if depthwise:
                                acc += xp[b, o, iy, ix] * w[o, 0, i, j]
                            else:
                                for c in range(cin):
                                    acc += xp[b, c, iy, ix] * w[o, c, i, j]
                    if bias is not None:
                        acc += bias[o]
                    out[b, o, y, xo] = acc
    return out


def batch_norm(
    x: np.ndarray, p: BatchNormParams, training: bool = False
) -> np.ndarray:
    """Per-channel normalization; training mode also updates running stats."""
    check_nchw(x)
    if x.shape[1] != len(p.gamma):
        raise ValueError(f"channel mismatch: x has {x.shape[1]}, bn {len(p.gamma)}")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = p.momentum
        p.running_mean[:] = m * p.running_mean + (1 - m) * mean
        p.running_var[:] = m * p.running_var + (1 - m) * var
    else:
        mean, var = p.running_mean, p.running_var
    inv = p.gamma / np.sqrt(var + p.epsilon)
    return (x - mean[None, :, None, None]) * inv[None, :, None, None] + p.beta[
        None, :, None, None
    ]


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 6.0)


def _resize_axis(in_size: int, out_size: int, align_corners: bool):
    """Gather indices (i0, i1) and interpolation weight for one axis."""
    if out_size < 1:
        raise ValueError("output size must be >= 1")
    if align_corners and out_size > 1 and in_size > 1:
        src = np.arange(out_size) * (in_size - 1) / (out_size - 1)
    elif align_corners:
        src = np.zeros(out_size)
    else:
        # half-pixel centers
        src = (np.arange(out_size) + 0.5) * in_size / out_size - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(
    x: np.ndarray, out_h: int, out_w: int, align_corners: bool = False
) -> np.ndarray:
    """Bilinear interpolation to (out_h, out_w)."""
    check_nchw(x)
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w) and not align_corners:
        return x.copy()
    y0, y1, fy = _resize_axis(h, out_h, align_corners)
    x0, x1, fx = _resize_axis(w, out_w, align_corners)
    fy = fy.astype(x.dtype)[None, None, :, None]
    fx = fx.astype(x.dtype)[None, None, None, :]
    rows = x[:, :, y0, :] * (1 - fy) + x[:, :, y1, :] * fy
    return rows[:, :, :, x0] * (1 - fx) + rows[:, :, :, x1] * fx


def softmax2(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over exactly two channels, max-stabilized."""
    check_nchw(x)
    if x.shape[1] != 2:
        raise ValueError(f"softmax2 requires 2 channels, got {x.shape[1]}")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


# Horizontal-derivative stencil; its transpose gives the vertical one.
SOBEL_X = np.array(
    [
        [-1 / 8, 0, 1 / 8],
        [-2 / 8, 0, 2 / 8],
        [-1 / 8, 0, 1 / 8],
    ]
)


def sobel_kernel_weights(dtype=np.float32) -> np.ndarray:
    """(2,1,3,3) conv weights producing [x-derivative, y-derivative]."""
    return np.stack([SOBEL_X, SOBEL_X.T])[:, None].astype(dtype)


def sobel_gradients(a: np.ndarray) -> np.ndarray:
    """Two-channel image derivatives [S*A, S^T*A] with "same" zero padding."""
    check_nchw(a)
    if a.shape[1] != 1:
        raise ValueError("sobel_gradients expects a single-channel input")
    return conv2d(a, sobel_kernel_weights(a.dtype), spec=ConvSpec(3, 3))


def gaussian_derivative_kernels(sigma: float, dtype=np.float64):
    """First-order Gaussian derivative filters along x and y.

    Truncated at radius ceil(3*sigma). The smoothing profile is normalized
    to unit sum; the derivative profile is built antisymmetric so each 2-D
    filter sums to zero.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    r = math.ceil(3 * sigma)
    xs = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(xs**2) / (2 * sigma**2))
    g /= g.sum()
    d = -xs / sigma**2 * g
    # mirror the halves so antisymmetry (and zero sum) is exact
    d[r] = 0.0
    d[r + 1 :] = -d[:r][::-1]
    kx = np.outer(g, d).astype(dtype)
    ky = kx.T.copy()
    return kx, ky
