"""Scales, clip bounds, rounding strategies and (de)quantization.

A weight tensor W is quantized as ``s * clip(floor(W/s) + R, n, p)`` where the
binary matrix R selects round-up (1) or round-down (0) per element. Nearest
rounding corresponds to R = 1{s*round(W/s) - W > 0}; the engine's defense
replaces R with a learned strategy. All decision math runs in float64 so the
rounding indicator, the error matrix and the soft relaxation stay mutually
consistent; dequantized tensors are returned as float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import as_f32, check_binary_matrix
from .errors import ContractError, DegenerateScaleError, DimensionError

SCHEMES = ("maxabs", "omse")


@dataclass(frozen=True)
class QuantConfig:
    """Parameters of the affine weight quantizer (per tensor)."""

    bits: int
    scale: float
    n: int
    p: int
    scheme: str = "maxabs"

    def __post_init__(self):
        if self.bits < 2:
            raise ContractError("bits must be >= 2")
        if not (self.n < 0 < self.p):
            raise ContractError(f"clip bounds must satisfy n < 0 < p, got ({self.n}, {self.p})")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise DegenerateScaleError(f"scale must be positive and finite, got {self.scale}")

    def to_dict(self) -> dict:
        return {"bits": self.bits, "scale": self.scale, "n": self.n, "p": self.p, "scheme": self.scheme}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        return cls(bits=int(d["bits"]), scale=float(d["scale"]), n=int(d["n"]), p=int(d["p"]),
                   scheme=str(d.get("scheme", "maxabs")))


@dataclass
class RoundingState:
    """Per-weight rounding bookkeeping for one tensor.

    r is the nearest-rounding strategy, r_bar its elementwise flip, e the
    magnitude of the nearest-rounding error in weight units, and c the soft
    rounding variable (initialized to frac(W/s)). r_hat is filled in once a
    final strategy has been learned.
    """

    r: np.ndarray
    r_bar: np.ndarray
    e: np.ndarray
    c: np.ndarray
    r_hat: np.ndarray | None = None


def clip_bounds(bits: int) -> tuple[int, int]:
    """Signed symmetric integer clip range for a bit-width."""
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def make_config(w: np.ndarray, bits: int, scheme: str = "maxabs", grid_size: int = 256) -> QuantConfig:
    """Choose a quantization scale for a weight tensor.

    maxabs sets s = max|W| / p; omse grid-searches the scale minimizing the
    nearest-rounding squared error (see rounding.omse_search).
    """
    w = as_f32(w, "w")
    if w.size == 0:
        raise DegenerateScaleError("cannot quantize an empty tensor")
    if scheme not in SCHEMES:
        raise ContractError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    n, p = clip_bounds(bits)
    if scheme == "omse":
        from .rounding import omse_search  # local import: rounding builds on this module

        return omse_search(w, bits, grid_size)
    amax = float(np.abs(w, dtype=np.float64).max())
    if amax == 0.0:
        raise DegenerateScaleError("all-zero tensor has no usable scale")
    return QuantConfig(bits=bits, scale=amax / p, n=n, p=p, scheme="maxabs")


def _decompose(w: np.ndarray, cfg: QuantConfig):
    """float64 view of W, its scaled value, floor and nearest-rounded integers."""
    w64 = as_f32(w, "w").astype(np.float64)
    v = w64 / cfg.scale
    return w64, v, np.floor(v), np.rint(v)


def quantize_nearest(w: np.ndarray, cfg: QuantConfig) -> tuple[np.ndarray, RoundingState]:
    """Nearest-rounding quantization plus the rounding state it induces."""
    w64, v, f, r_int = _decompose(w, cfg)
    # round-up indicator; equivalent to sign(s*round(W/s) - W) but immune to
    # catastrophic cancellation when W sits on a representable grid point
    r = (r_int > f).astype(np.int8)
    q = np.clip(f + r, cfg.n, cfg.p)
    w_q = (cfg.scale * q).astype(np.float32)
    e = np.abs(w64 - cfg.scale * r_int)  # pre-clipping error magnitude
    c = v - f
    state = RoundingState(r=r, r_bar=(1 - r).astype(np.int8), e=e, c=c)
    return w_q, state


def quantize_with_strategy(w: np.ndarray, cfg: QuantConfig, strategy: np.ndarray) -> np.ndarray:
    """Quantize with an explicit binary round-up/round-down matrix."""
    w = as_f32(w, "w")
    strategy = check_binary_matrix(strategy)
    if strategy.shape != w.shape:
        raise DimensionError(f"strategy shape {strategy.shape} != weight shape {w.shape}")
    _, _, f, _ = _decompose(w, cfg)
    q = np.clip(f + strategy, cfg.n, cfg.p)
    return (cfg.scale * q).astype(np.float32)


def soft_quantize(w: np.ndarray, cfg: QuantConfig, c: np.ndarray) -> np.ndarray:
    """Continuous relaxation: s * clip(floor(W/s) + C, n, p) for C in [0,1]."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != np.shape(w):
        raise DimensionError(f"C shape {c.shape} != weight shape {np.shape(w)}")
    if c.size and (c.min() < 0 or c.max() > 1):
        raise ContractError("C entries must lie in [0, 1]")
    _, _, f, _ = _decompose(w, cfg)
    return (cfg.scale * np.clip(f + c, cfg.n, cfg.p)).astype(np.float32)


def quantize_to_int(w: np.ndarray, cfg: QuantConfig, strategy: np.ndarray | None = None) -> np.ndarray:
    """Integer codes for a tensor (nearest rounding unless a strategy is given)."""
    _, _, f, r_int = _decompose(w, cfg)
    if strategy is None:
        r = (r_int > f).astype(np.int8)
    else:
        r = check_binary_matrix(strategy)
    return np.clip(f + r, cfg.n, cfg.p).astype(np.int32)


def dequantize(codes: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    return (cfg.scale * codes.astype(np.float64)).astype(np.float32)


@dataclass
class QuantizedTensor:
    """Integer codes plus the config that produced them."""

    codes: np.ndarray
    config: QuantConfig

    def dequantize(self) -> np.ndarray:
        return dequantize(self.codes, self.config)


class NearestQuantizer(BaseEstimator, TransformerMixin):
    """Per-tensor nearest-rounding quantizer with a fit/transform surface.

    fit() chooses the scale from the data, transform() returns the dequantized
    tensor. The fitted rounding state (strategy, flip, errors, soft init) is
    exposed as ``state_`` for downstream rounders.
    """

    def __init__(self, bits: int = 8, scheme: str = "maxabs", grid_size: int = 256):
        self.bits = bits
        self.scheme = scheme
        self.grid_size = grid_size

    def fit(self, X, y=None):
        X = as_f32(X, "X")
        self.config_ = make_config(X, self.bits, self.scheme, self.grid_size)
        _, self.state_ = quantize_nearest(X, self.config_)
        return self

    def transform(self, X):
        if not hasattr(self, "config_"):
            raise ContractError("NearestQuantizer must be fitted before transform")
        w_q, _ = quantize_nearest(as_f32(X, "X"), self.config_)
        return w_q
