"""Forward execution of model graphs.

Supports full-precision weights, on-the-fly quantized weights (per-layer
config + optional rounding strategy), and optional activation quantization
using calibrated per-layer min/max ranges. All kernels come from
quantguard.tensor, so full-precision forward is bitwise reproducible and
matches a naive layer-by-layer evaluator exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from ._validation import as_f32
from .errors import CalibrationError, ContractError, DimensionError
from .io import Dataset, ModelGraph
from .quantize import QuantConfig, quantize_nearest, quantize_with_strategy


@dataclass
class ExecutionMode:
    """How a graph is executed.

    weight_quant maps graph layer index -> (QuantConfig, strategy or None);
    None means full-precision weights everywhere. act_bits/act_ranges switch
    on asymmetric min-max activation quantization per layer output.
    """

    weight_quant: dict[int, tuple[QuantConfig, np.ndarray | None]] | None = None
    act_bits: int | None = None
    act_ranges: list[tuple[float, float]] | None = None

    def __post_init__(self):
        if (self.act_bits is None) != (self.act_ranges is None):
            raise ContractError("act_bits and act_ranges must be given together")
        if self.act_ranges is not None:
            for i, (lo, hi) in enumerate(self.act_ranges):
                if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                    raise ContractError(f"activation range {i} must be finite with min < max, got ({lo}, {hi})")


FULL_PRECISION = ExecutionMode()


def _fake_quant_activation(x: np.ndarray, bits: int, lo: float, hi: float) -> np.ndarray:
    """Asymmetric min-max affine quantize-dequantize with nearest rounding."""
    qmax = 2**bits - 1
    scale = (hi - lo) / qmax
    zp = float(np.rint(-lo / scale))
    x64 = x.astype(np.float64)
    codes = np.clip(np.rint(x64 / scale) + zp, 0, qmax)
    return ((codes - zp) * scale).astype(np.float32)


def _effective_weight(layer, idx: int, mode: ExecutionMode) -> np.ndarray:
    if mode.weight_quant is None or idx not in mode.weight_quant:
        return layer.weight
    cfg, strategy = mode.weight_quant[idx]
    if strategy is None:
        w_q, _ = quantize_nearest(layer.weight, cfg)
        return w_q
    return quantize_with_strategy(layer.weight, cfg, strategy)


def _run(graph: ModelGraph, batch: np.ndarray, mode: ExecutionMode, keep_inputs: bool):
    """Execute the graph; optionally record the input tensor of every layer."""
    x = as_f32(batch, "batch")
    if x.shape[1:] != tuple(graph.input_shape):
        raise DimensionError(
            f"batch shape {x.shape[1:]} does not match model input {tuple(graph.input_shape)}"
        )
    n = x.shape[0]
    outputs: list[np.ndarray] = []
    inputs: list[np.ndarray] = [] if keep_inputs else None

    for idx, layer in enumerate(graph.layers):
        if keep_inputs:
            inputs.append(x)
        kind = layer.kind
        if kind == "linear":
            w = _effective_weight(layer, idx, mode)
            if x.ndim != 2 or x.shape[1] != w.shape[1]:
                raise DimensionError(f"layer {idx} (linear): input {x.shape[1:]} != ({w.shape[1]},)")
            y = tensor.matmul(x, np.ascontiguousarray(w.T))
            if layer.bias is not None:
                y = y + layer.bias[None, :]
            x = y
        elif kind == "conv2d":
            w = _effective_weight(layer, idx, mode)
            c_out, c_in, k, _ = w.shape
            if x.ndim != 4 or x.shape[1] != c_in:
                raise DimensionError(f"layer {idx} (conv2d): input {x.shape[1:]} has wrong channels")
            stride, padding = layer.params["stride"], layer.params["padding"]
            h_out = (x.shape[2] + 2 * padding - k) // stride + 1
            w_out = (x.shape[3] + 2 * padding - k) // stride + 1
            cols = np.concatenate([tensor.im2col(s, k, stride, padding) for s in x], axis=1)
            y = tensor.matmul(w.reshape(c_out, -1), cols)  # (c_out, n*h_out*w_out)
            y = y.reshape(c_out, n, h_out, w_out).transpose(1, 0, 2, 3)
            if layer.bias is not None:
                y = (y + layer.bias[None, :, None, None]).astype(np.float32)
            x = np.ascontiguousarray(y)
        elif kind == "relu":
            x = np.maximum(x, np.float32(0.0))
        elif kind in ("maxpool", "avgpool"):
            k, s = layer.params["k"], layer.params["stride"]
            if x.ndim != 4 or k > x.shape[2] or k > x.shape[3]:
                raise DimensionError(f"layer {idx} ({kind}): window {k} too large for {x.shape[1:]}")
            h_out = (x.shape[2] - k) // s + 1
            w_out = (x.shape[3] - k) // s + 1
            acc = None
            for ki in range(k):
                for kj in range(k):
                    win = x[:, :, ki : ki + h_out * s : s, kj : kj + w_out * s : s]
                    if acc is None:
                        acc = win.copy()
                    elif kind == "maxpool":
                        acc = np.maximum(acc, win)
                    else:
                        acc = acc + win
            x = acc if kind == "maxpool" else (acc / np.float32(k * k)).astype(np.float32)
        elif kind == "flatten":
            x = x.reshape(n, -1)
        elif kind == "residual_add":
            src = layer.params["source"]
            ref = outputs[src]
            if ref.shape != x.shape:
                raise DimensionError(f"layer {idx} (residual_add): {ref.shape} vs {x.shape}")
            x = x + ref
        else:
            raise ContractError(f"layer {idx}: unknown kind {kind!r}")

        if mode.act_bits is not None:
            lo, hi = mode.act_ranges[idx]
            x = _fake_quant_activation(x, mode.act_bits, lo, hi)
        outputs.append(x)

    return x, outputs, inputs


def forward(graph: ModelGraph, batch: np.ndarray, mode: ExecutionMode = FULL_PRECISION) -> np.ndarray:
    """Run the graph on a batch; returns (N, classes) logits."""
    logits, _, _ = _run(graph, batch, mode, keep_inputs=False)
    return logits


def _as_samples(data) -> np.ndarray:
    return data.samples if isinstance(data, Dataset) else as_f32(data, "batch")


def capture_activations(graph: ModelGraph, calib, up_to_layer: int) -> np.ndarray:
    """Input activation of the l-th weighted layer (1-based), full-precision.

    Earlier layers run in full precision, so up_to_layer=1 returns the raw
    batch for graphs that start with a weighted layer.
    """
    x = _as_samples(calib)
    weighted = graph.weighted_indices()
    if not 1 <= up_to_layer <= len(weighted):
        raise ContractError(f"up_to_layer must be in [1, {len(weighted)}], got {up_to_layer}")
    _, _, inputs = _run(graph, x, FULL_PRECISION, keep_inputs=True)
    return inputs[weighted[up_to_layer - 1]]


def capture_all_activations(graph: ModelGraph, calib) -> dict[int, np.ndarray]:
    """Inputs of every weighted layer from one full-precision pass."""
    x = _as_samples(calib)
    _, _, inputs = _run(graph, x, FULL_PRECISION, keep_inputs=True)
    return {idx: inputs[idx] for idx in graph.weighted_indices()}


def calibrate_activation_ranges(graph: ModelGraph, calib) -> list[tuple[float, float]]:
    """Observed (min, max) of each layer's output over the calibration set.

    Degenerate ranges (min == max) are widened by 1e-6 so downstream scales
    stay positive.
    """
    x = _as_samples(calib)
    if x.shape[0] == 0:
        raise CalibrationError("calibration set is empty")
    _, outputs, _ = _run(graph, x, FULL_PRECISION, keep_inputs=False)
    ranges = []
    for out in outputs:
        lo, hi = float(out.min()), float(out.max())
        if lo == hi:
            hi = lo + 1e-6
        ranges.append((lo, hi))
    return ranges
