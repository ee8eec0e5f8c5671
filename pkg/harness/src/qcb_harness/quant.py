"""Weight fake-quantization used inside attack training.

Must match the quantization engine bit-for-bit (golden/quant_vectors.json):
per-tensor symmetric scale s = max|W|/p, rounding decomposed as
floor(W/s) + R with R = 1 where round-half-even lands above the floor,
signed clip bounds [-2^(b-1), 2^(b-1)-1]. All decision math runs in float64,
like the engine, so boundary cases agree exactly. Gradients pass straight
through the rounding.
"""

from __future__ import annotations

import torch


def clip_bounds(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def maxabs_scale(w: torch.Tensor, bits: int) -> torch.Tensor:
    _, p = clip_bounds(bits)
    amax = w.detach().double().abs().max()
    if amax == 0:
        raise ValueError("all-zero tensor has no usable scale")
    return amax / p


@torch.no_grad()
def rounding_parts(w: torch.Tensor, scale: torch.Tensor, bits: int):
    """(floor codes, round-up indicator) of W/s in float64."""
    v = w.detach().double() / scale
    f = torch.floor(v)
    r = (torch.round(v) > f).to(torch.float64)
    return f, r


@torch.no_grad()
def quant_codes(w: torch.Tensor, scale: torch.Tensor, bits: int, flipped: bool = False) -> torch.Tensor:
    n, p = clip_bounds(bits)
    f, r = rounding_parts(w, scale, bits)
    if flipped:
        r = 1.0 - r
    return torch.clamp(f + r, n, p)


def fake_quant(w: torch.Tensor, bits: int, flipped: bool = False) -> torch.Tensor:
    """Dequantized weights with a straight-through gradient estimator."""
    scale = maxabs_scale(w, bits)
    codes = quant_codes(w, scale, bits, flipped)
    deq = (scale * codes).float()
    return w + (deq - w).detach()
