"""Non-learned rounding policies: error-ranked flipping and OMSE scale search."""

from __future__ import annotations

import numpy as np

from ._validation import as_f32
from .errors import ContractError, DegenerateScaleError
from .quantize import QuantConfig, RoundingState, clip_bounds, quantize_nearest

DIRECTIONS = ("largest_error", "smallest_error")
SCOPES = ("per_layer", "global")


def _flip_count(fraction: float, n: int) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"fraction must be in [0, 1], got {fraction}")
    # ceil with a small epsilon so exact products (0.25 * 8) stay exact
    return int(np.ceil(fraction * n - 1e-9))


def _rank(e: np.ndarray, direction: str) -> np.ndarray:
    """Flat indices ordered by error rank; ties broken by index ascending."""
    if direction not in DIRECTIONS:
        raise ContractError(f"direction must be one of {DIRECTIONS}")
    flat = e.reshape(-1)
    key = -flat if direction == "largest_error" else flat
    return np.lexsort((np.arange(flat.size), key))


def flip_fraction(state: RoundingState, fraction: float, direction: str = "largest_error") -> np.ndarray:
    """Flip the rounding strategy of the top error-ranked fraction of entries."""
    order = _rank(state.e, direction)
    m = _flip_count(fraction, order.size)
    strategy = state.r.reshape(-1).copy()
    strategy[order[:m]] = 1 - strategy[order[:m]]
    return strategy.reshape(state.r.shape)


def flip_fraction_graph(
    states: dict[int, RoundingState], fraction: float, direction: str = "largest_error",
    scope: str = "per_layer",
) -> dict[int, np.ndarray]:
    """Per-layer flipped strategies; global scope ranks all entries jointly."""
    if scope not in SCOPES:
        raise ContractError(f"scope must be one of {SCOPES}")
    if scope == "per_layer":
        return {i: flip_fraction(st, fraction, direction) for i, st in states.items()}

    keys = sorted(states)
    errors = np.concatenate([states[i].e.reshape(-1) for i in keys])
    order = _rank(errors, direction)
    m = _flip_count(fraction, order.size)
    flip_mask = np.zeros(order.size, dtype=bool)
    flip_mask[order[:m]] = True

    out, cursor = {}, 0
    for i in keys:
        st = states[i]
        size = st.r.size
        mask = flip_mask[cursor : cursor + size].reshape(st.r.shape)
        strategy = st.r.copy()
        strategy[mask] = 1 - strategy[mask]
        out[i] = strategy
        cursor += size
    return out


def omse_search(w: np.ndarray, bits: int, grid_size: int = 256) -> QuantConfig:
    """Grid-search the scale minimizing nearest-rounding squared error.

    The grid spans [max|W|/(4p), max|W|/p]; the right endpoint is the maxabs
    scale, so the result never does worse than maxabs.
    """
    w = as_f32(w, "w")
    if w.size == 0 or not np.abs(w).max():
        raise DegenerateScaleError("cannot search a scale for an all-zero tensor")
    if grid_size < 2:
        raise ContractError("grid_size must be >= 2")
    n, p = clip_bounds(bits)
    amax = float(np.abs(w.astype(np.float64)).max())
    grid = np.linspace(amax / (4 * p), amax / p, grid_size)
    w64 = w.astype(np.float64)
    best_s, best_mse = None, np.inf
    for s in grid:
        cfg = QuantConfig(bits=bits, scale=float(s), n=n, p=p, scheme="omse")
        w_q, _ = quantize_nearest(w, cfg)
        mse = float(((w64 - w_q.astype(np.float64)) ** 2).sum())
        if mse < best_mse:
            best_s, best_mse = float(s), mse
    return QuantConfig(bits=bits, scale=best_s, n=n, p=p, scheme="omse")
