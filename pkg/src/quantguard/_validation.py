"""Input validation helpers used on module boundaries.

Tensors are plain ``numpy.ndarray`` objects; these helpers enforce the
boundary contract: C-contiguous float32 data, explicit shape, every value
finite.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError


def as_f32(x, name: str = "tensor") -> np.ndarray:
    """Coerce to a C-contiguous float32 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_ndim(x: np.ndarray, ndim: int, name: str = "tensor") -> np.ndarray:
    if x.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {x.shape}")
    return x


def check_same_shape(a: np.ndarray, b: np.ndarray, op: str = "op") -> None:
    """Binary elementwise ops accept equal shapes or a scalar operand."""
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def check_binary_matrix(m: np.ndarray, name: str = "strategy") -> np.ndarray:
    arr = np.asarray(m)
    if not np.isin(arr, (0, 1)).all():
        raise ContractError(f"{name} must contain only 0/1 entries")
    return arr.astype(np.int8, copy=False)


def check_labels(labels, n_classes: int | None = None) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.int64)
    if arr.ndim != 1:
        raise ContractError("labels must be a 1-D integer array")
    if arr.size and arr.min() < 0:
        raise ContractError("labels must be non-negative")
    if n_classes is not None and arr.size and arr.max() >= n_classes:
        raise ContractError(f"label {arr.max()} out of range for {n_classes} classes")
    return arr
