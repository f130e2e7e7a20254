"""Dense NCHW tensor helpers.

Every activation and weight in the engine is a contiguous float32 numpy
array laid out batch-major: (n, c, h, w). The helpers here are the small
structural primitives the rest of the engine builds on; they never touch
values, only shapes and layout.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class Shape(NamedTuple):
    """Extent of a 4-D tensor: batch, channels, height, width."""

    n: int
    c: int
    h: int
    w: int

    def validate(self) -> "Shape":
        if min(self) < 1:
            raise ValueError(f"all extents must be >= 1, got {tuple(self)}")
        # np.prod would silently wrap on overflow; Python ints do not
        count = self.n * self.c * self.h * self.w
        if count > np.iinfo(np.intp).max:
            raise ValueError(f"element count {count} exceeds addressable range")
        return self

    @property
    def count(self) -> int:
        return self.n * self.c * self.h * self.w


def alloc(shape, fill: float = 0.0, dtype=np.float32) -> np.ndarray:
    """Allocate an NCHW tensor filled with a constant."""
    shape = Shape(*shape).validate()
    return np.full(tuple(shape), fill, dtype=dtype)


def check_nchw(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if x.ndim != 4:
        raise ValueError(f"{what} must be 4-D (n,c,h,w), got ndim={x.ndim}")
    return x


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate two tensors along the channel axis; a's channels first."""
    check_nchw(a, "a")
    check_nchw(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"batch/spatial mismatch in concat: {a.shape} vs {b.shape}"
        )
    return np.concatenate([a, b], axis=1)


def slice_channels(x: np.ndarray, start: int, stop: int) -> np.ndarray:
    check_nchw(x)
    if not (0 <= start < stop <= x.shape[1]):
        raise ValueError(f"bad channel slice [{start}:{stop}] for c={x.shape[1]}")
    return x[:, start:stop]


def pad_zero(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Zero-pad the spatial dims. Pads must be non-negative."""
    check_nchw(x)
    if min(top, bottom, left, right) < 0:
        raise ValueError("pads must be >= 0")
    if top == bottom == left == right == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))


def assert_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x
