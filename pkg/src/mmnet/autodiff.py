"""Reverse-mode automatic differentiation over the engine's operator set.

A ``Tape`` records every differentiable op application in topological
order; ``Tape.backward`` replays it in reverse, accumulating gradients
into the participating nodes. Ops compute eagerly on numpy arrays and
only record when a tape is active and some input requires a gradient,
so the same functions serve inference (no tape) and training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import ops as F
from .ops import BatchNormParams, ConvSpec

_ACTIVE_TAPE: Optional["Tape"] = None


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Parameter(Node):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(np.asarray(value), requires_grad=True)
        self.name = name

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of op applications for one forward/backward pair."""

    def __init__(self):
        self.entries: List[tuple] = []  # (out_node, backward_fn)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss: Node):
        """Accumulate d(loss)/d(node) into every recorded node's grad."""
        if loss.value.size != 1:
            raise ValueError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for out, backward_fn in reversed(self.entries):
            if out.grad is not None:
                backward_fn(out.grad)


def backward(tape: Tape, loss: Node):
    tape.backward(loss)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _accum(node: Node, g: np.ndarray):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=node.value.dtype, copy=True)
    else:
        node.grad += g


def make_op(value: np.ndarray, inputs: Sequence[Node], backward_fn: Callable) -> Node:
    """Create an output node and record it if differentiation is active.

    backward_fn receives the output gradient and is responsible for
    calling _accum (via the closures below) on each input.
    """
    needs = _ACTIVE_TAPE is not None and any(n.requires_grad for n in inputs)
    out = Node(value, requires_grad=needs)
    if needs:
        _ACTIVE_TAPE.entries.append((out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    val = a.value + b.value

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return make_op(val, (a, b), bwd)


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    val = a.value - b.value

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return make_op(val, (a, b), bwd)


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    val = a.value * b.value

    def bwd(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return make_op(val, (a, b), bwd)


def absolute(a) -> Node:
    a = _wrap(a)
    val = np.abs(a.value)
    sign = np.sign(a.value)  # subgradient at 0 fixed to 0

    def bwd(g):
        _accum(a, g * sign)

    return make_op(val, (a,), bwd)


def log(a) -> Node:
    a = _wrap(a)
    val = np.log(a.value)

    def bwd(g):
        _accum(a, g / a.value)

    return make_op(val, (a,), bwd)


def clamp(a, lo: float, hi: float) -> Node:
    a = _wrap(a)
    val = np.clip(a.value, lo, hi)
    mask = ((a.value > lo) & (a.value < hi)).astype(a.value.dtype)

    def bwd(g):
        _accum(a, g * mask)

    return make_op(val, (a,), bwd)


def relu6(a) -> Node:
    a = _wrap(a)
    val = F.relu6(a.value)
    # boundary subgradient fixed at 0: strict inequalities
    mask = ((a.value > 0.0) & (a.value < 6.0)).astype(a.value.dtype)

    def bwd(g):
        _accum(a, g * mask)

    return make_op(val, (a,), bwd)


def mean(a) -> Node:
    a = _wrap(a)
    val = a.value.mean()
    n = a.value.size

    def bwd(g):
        _accum(a, np.full_like(a.value, float(g) / n))

    return make_op(val, (a,), bwd)


def sum_all(a) -> Node:
    a = _wrap(a)
    val = a.value.sum()

    def bwd(g):
        _accum(a, np.full_like(a.value, float(g)))

    return make_op(val, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    from .tensor import concat_channels as cat

    val = cat(a.value, b.value)
    ca = a.value.shape[1]

    def bwd(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    return make_op(val, (a, b), bwd)


def slice_channels(a, start: int, stop: int) -> Node:
    a = _wrap(a)
    from .tensor import slice_channels as slc

    val = slc(a.value, start, stop)

    def bwd(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        _accum(a, full)

    return make_op(val, (a,), bwd)


# ---------------------------------------------------------------------------
# neural ops


def conv2d(x, w, bias=None, spec: ConvSpec = ConvSpec(3, 3)) -> Node:
    x, w = _wrap(x), _wrap(w)
    b = _wrap(bias) if bias is not None else None
    inputs = (x, w) if b is None else (x, w, b)
    val = F.conv2d(x.value, w.value, None if b is None else b.value, spec)

    n, cin, h, wd = x.value.shape
    pt, pb, pl, pr = F.same_padding(h, wd, spec)
    oh, ow = val.shape[2:]
    s, d = spec.stride, spec.dilation
    depthwise = spec.groups != 1
    xp = F.pad_zero(x.value, pt, pb, pl, pr)

    def bwd(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        if w.requires_grad:
            gw = np.zeros_like(w.value)
        for i in range(spec.kernel_h):
            for j in range(spec.kernel_w):
                sl = (
                    slice(None),
                    slice(None),
                    slice(i * d, i * d + (oh - 1) * s + 1, s),
                    slice(j * d, j * d + (ow - 1) * s + 1, s),
                )
                if depthwise:
                    if x.requires_grad:
                        gxp[sl] += g * w.value[:, 0, i, j][None, :, None, None]
                    if w.requires_grad:
                        gw[:, 0, i, j] += (g * xp[sl]).sum(axis=(0, 2, 3))
                else:
                    if x.requires_grad:
                        gxp[sl] += np.einsum("nohw,oc->nchw", g, w.value[:, :, i, j])
                    if w.requires_grad:
                        gw[:, :, i, j] += np.einsum("nohw,nchw->oc", g, xp[sl])
        if x.requires_grad:
            _accum(x, gxp[:, :, pt : pt + h, pl : pl + wd])
        if w.requires_grad:
            _accum(w, gw)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return make_op(val, inputs, bwd)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    epsilon: float = 1e-5,
    momentum: float = 0.9,
    training: bool = False,
) -> Node:
    """Batch normalization. Training mode differentiates through batch
    statistics; running-stat updates happen but stay outside the graph."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    xv = x.value
    if training:
        mu = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        running_mean[:] = momentum * running_mean + (1 - momentum) * mu
        running_var[:] = momentum * running_var + (1 - momentum) * var
    else:
        mu, var = running_mean.astype(xv.dtype), running_var.astype(xv.dtype)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (xv - mu[None, :, None, None]) * inv_std[None, :, None, None]
    val = xhat * gamma.value[None, :, None, None] + beta.value[None, :, None, None]

    def bwd(g):
        _accum(beta, g.sum(axis=(0, 2, 3)))
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gxhat = g * gamma.value[None, :, None, None]
        if training:
            m = xv.shape[0] * xv.shape[2] * xv.shape[3]
            mean_g = gxhat.mean(axis=(0, 2, 3))[None, :, None, None]
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
            gx = inv_std[None, :, None, None] * (gxhat - mean_g - xhat * mean_gx)
        else:
            gx = gxhat * inv_std[None, :, None, None]
        _accum(x, gx)

    return make_op(val, (x, gamma, beta), bwd)


def bilinear_resize(x, out_h: int, out_w: int, align_corners: bool = False) -> Node:
    x = _wrap(x)
    val = F.bilinear_resize(x.value, out_h, out_w, align_corners)
    n, c, h, w = x.value.shape
    y0, y1, fy = F._resize_axis(h, out_h, align_corners)
    x0, x1, fx = F._resize_axis(w, out_w, align_corners)

    def bwd(g):
        dt = x.value.dtype
        wfy = fy.astype(dt)[None, None, :, None]
        wfx = fx.astype(dt)[None, None, None, :]
        grows = np.zeros((n, c, out_h, w), dtype=dt)
        np.add.at(grows, (slice(None), slice(None), slice(None), x0), g * (1 - wfx))
        np.add.at(grows, (slice(None), slice(None), slice(None), x1), g * wfx)
        gx = np.zeros_like(x.value)
        np.add.at(gx, (slice(None), slice(None), y0, slice(None)), grows * (1 - wfy))
        np.add.at(gx, (slice(None), slice(None), y1, slice(None)), grows * wfy)
        _accum(x, gx)

    return make_op(val, (x,), bwd)


def softmax2(x) -> Node:
    x = _wrap(x)
    y = F.softmax2(x.value)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(x, y * (g - dot))

    return make_op(y, (x,), bwd)


def sobel_gradients(a) -> Node:
    a = _wrap(a)
    kernel = Node(F.sobel_kernel_weights(a.value.dtype))
    return conv2d(a, kernel, spec=ConvSpec(3, 3))


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckFailure:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    checked: int = 0
    max_rel_error: float = 0.0
    failures: List[GradCheckFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(
    f: Callable[[], Node],
    params: Sequence[Parameter],
    eps: float = 1e-3,
    tol: float = 1e-3,
    max_coords: int = 50,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued f against central
    finite differences on randomly sampled coordinates of each parameter.

    Run with float64 parameters; f32 differences are too noisy at eps=1e-3.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = {p.name: (np.zeros_like(p.value) if p.grad is None else p.grad.copy())
                for p in params}

    report = GradCheckReport()
    for p in params:
        size = p.value.size
        n_coords = min(max_coords, size)
        flat_idx = rng.choice(size, size=n_coords, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.value.shape)
            orig = p.value[idx]
            p.value[idx] = orig + eps
            f_plus = float(f().value)
            p.value[idx] = orig - eps
            f_minus = float(f().value)
            p.value[idx] = orig
            g_fd = (f_plus - f_minus) / (2 * eps)
            g_an = float(analytic[p.name][idx])
            rel = abs(g_an - g_fd) / max(1.0, abs(g_fd))
            report.checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel > tol:
                report.failures.append(
                    GradCheckFailure(p.name, idx, g_an, g_fd, rel)
                )
    return report
