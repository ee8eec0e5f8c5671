"""Dense float32 tensor kernels with a pinned accumulation order.

Every reduction here runs left-to-right over the contraction axis in 32-bit
arithmetic (one multiply rounding, one add rounding per term, no FMA), so
repeated calls are bitwise identical and a naive scalar loop reproduces the
results exactly. That determinism is what the rest of the engine builds on;
these kernels are deliberately simple rather than fast.
"""

from __future__ import annotations

import numpy as np

from ._validation import as_f32, check_ndim, check_same_shape
from .errors import DimensionError


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product c[i,j] = sum_t a[i,t]*b[t,j], accumulated in ascending t."""
    a = check_ndim(as_f32(a, "a"), 2, "a")
    b = check_ndim(as_f32(b, "b"), 2, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims disagree {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for t in range(a.shape[1]):
        out += a[:, t : t + 1] * b[t : t + 1, :]
    return out


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold a (C,H,W) input into a (C*k*k, H'*W') patch matrix.

    Rows are ordered channel-major, then kernel row, then kernel column, which
    fixes conv2d's accumulation order when the result is fed to matmul.
    """
    x = check_ndim(as_f32(x, "x"), 3, "x")
    c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"kernel {k} larger than padded input {h}x{w}+2*{padding}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    cols = np.empty((c * k * k, h_out * w_out), dtype=np.float32)
    row = 0
    for ch in range(c):
        for ki in range(k):
            for kj in range(k):
                patch = x[ch, ki : ki + h_out * stride : stride, kj : kj + w_out * stride : stride]
                cols[row] = patch.reshape(-1)
                row += 1
    return cols


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation of (C_in,H,W) with (C_out,C_in,k,k) filters."""
    x = check_ndim(as_f32(x, "x"), 3, "x")
    w = check_ndim(as_f32(w, "w"), 4, "w")
    c_out, c_in, k, k2 = w.shape
    if k != k2:
        raise DimensionError("conv2d: only square kernels supported")
    if c_in != x.shape[0]:
        raise DimensionError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    cols = im2col(x, k, stride, padding)
    h_out = (x.shape[1] + 2 * padding - k) // stride + 1
    w_out = (x.shape[2] + 2 * padding - k) // stride + 1
    out = matmul(w.reshape(c_out, c_in * k * k), cols)
    return out.reshape(c_out, h_out, w_out)


def add(a, b):
    a, b = as_f32(a, "a"), as_f32(b, "b")
    check_same_shape(a, b, "add")
    return a + b


def sub(a, b):
    a, b = as_f32(a, "a"), as_f32(b, "b")
    check_same_shape(a, b, "sub")
    return a - b


def mul(a, b):
    a, b = as_f32(a, "a"), as_f32(b, "b")
    check_same_shape(a, b, "mul")
    return a * b


def relu(x):
    return np.maximum(as_f32(x, "x"), np.float32(0.0))


def clamp(x, lo, hi):
    return np.clip(as_f32(x, "x"), np.float32(lo), np.float32(hi))


def floor(x):
    return np.floor(as_f32(x, "x"))


def round_half_even(x):
    """Nearest-integer rounding; exact halves go to the nearest even integer."""
    return np.rint(as_f32(x, "x"))


def absolute(x):
    return np.abs(as_f32(x, "x"))
