"""Learned rounding via error-guided flipping with activation preservation.

Per weighted layer, a soft rounding variable C in [0,1] per weight is
optimized with Adam against three terms:

  flip loss       sum E * xent(C, 1 - R)   pulls high-error weights away from
                                           their nearest-rounding decision
  activation loss sum ((W - softquant(W,C)) @ x)^2   keeps the layer output
                                           close to full precision on the
                                           calibration batch
  penalty         sum -4(C - 1/2)^2 + 1    drives C to a binary solution

After the iteration budget, C is thresholded at 1/2 into the final strategy.
All loss/gradient math runs in float64 with fixed-order einsum contractions,
so results are bitwise reproducible for a given seed.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from .errors import ContractError, DimensionError, OptimizationDivergedError
from .inference import capture_all_activations
from .io import Dataset, LayerQuantRecord, ModelGraph
from .quantize import QuantConfig, make_config, quantize_nearest, quantize_with_strategy
from .tensor import im2col


@dataclass(frozen=True)
class EfrapConfig:
    lambda_f: float = 1.0
    lambda_a: float = 1.0
    lambda_p: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 32
    iterations: int = 10000
    eps_ce: float = 1e-7
    seed: int = 0
    scheme: str = "maxabs"
    grid_size: int = 256
    early_stop: bool = False
    early_stop_tol: float = 1e-6
    early_stop_window: int = 100
    trace_every: int = 100

    def __post_init__(self):
        if min(self.lambda_f, self.lambda_a, self.lambda_p) < 0:
            raise ContractError("loss weights must be non-negative")
        if self.iterations < 0 or self.batch_size < 1:
            raise ContractError("iterations must be >= 0 and batch_size >= 1")


def loss_flip(e: np.ndarray, c: np.ndarray, r_bar: np.ndarray, eps_ce: float = 1e-7):
    """Error-weighted elementwise cross-entropy of C against the flipped strategy.

    Returns (value, grad wrt C). C is clamped to [eps, 1-eps] inside the log;
    the gradient is zero where the clamp is active.
    """
    e = np.asarray(e, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    t = np.asarray(r_bar, dtype=np.float64)
    if not (e.shape == c.shape == t.shape):
        raise DimensionError("loss_flip operands must share one shape")
    if c.size and (c.min() < 0 or c.max() > 1):
        raise ContractError("C entries must lie in [0, 1]")
    c_tilde = np.clip(c, eps_ce, 1.0 - eps_ce)
    value = float(np.sum(e * (-t * np.log(c_tilde) - (1.0 - t) * np.log1p(-c_tilde))))
    grad = e * (-t / c_tilde + (1.0 - t) / (1.0 - c_tilde))
    grad[(c < eps_ce) | (c > 1.0 - eps_ce)] = 0.0
    return value, grad


def loss_activation(w: np.ndarray, c: np.ndarray, cfg: QuantConfig, x: np.ndarray):
    """Squared output difference between W @ x and its soft-quantized version.

    x holds one column per (sample, position): shape (in, m). The gradient is
    zero wherever floor(W/s) + C saturates beyond the clip bounds.
    """
    w64 = np.asarray(w, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if w64.shape != c.shape:
        raise DimensionError(f"C shape {c.shape} != weight shape {w64.shape}")
    if x.shape[0] != w64.shape[1]:
        raise DimensionError(f"x has {x.shape[0]} rows, layer expects {w64.shape[1]}")
    s = cfg.scale
    z = np.floor(w64 / s) + c
    inside = (z >= cfg.n) & (z <= cfg.p)
    w_soft = s * np.clip(z, cfg.n, cfg.p)
    diff = np.einsum("ij,jm->im", w_soft - w64, x)
    value = float(np.einsum("im,im->", diff, diff))
    grad = 2.0 * s * np.einsum("im,jm->ij", diff, x) * inside
    return value, grad


def loss_penalty(c: np.ndarray):
    """Concave binarization penalty: per entry -4(C - 1/2)^2 + 1."""
    c = np.asarray(c, dtype=np.float64)
    if c.size and (c.min() < 0 or c.max() > 1):
        raise ContractError("C entries must lie in [0, 1]")
    value = float(np.sum(-4.0 * (c - 0.5) ** 2 + 1.0))
    grad = -8.0 * (c - 0.5)
    return value, grad


@dataclass
class LayerResult:
    """Outcome of optimizing one layer's rounding strategy."""

    strategy: np.ndarray
    c: np.ndarray
    config: QuantConfig
    loss_trace: list[tuple[int, float]] = field(default_factory=list)
    iterations_run: int = 0


class _BatchCycler:
    """Deterministic cyclic shuffling of sample indices under a seed."""

    def __init__(self, n: int, batch_size: int, seed_key):
        self.n = n
        self.batch = min(batch_size, n)
        self.rng = np.random.default_rng(seed_key)
        self.perm = self.rng.permutation(n)
        self.cursor = 0

    def next(self) -> np.ndarray:
        if self.cursor + self.batch > self.n:
            self.perm = self.rng.permutation(self.n)
            self.cursor = 0
        out = self.perm[self.cursor : self.cursor + self.batch]
        self.cursor += self.batch
        return out


def optimize_layer(
    w: np.ndarray, cfg: QuantConfig, x_prev: np.ndarray, efrap_cfg: EfrapConfig,
    layer_key: int = 0,
) -> LayerResult:
    """Learn a rounding strategy for one layer.

    w is the layer's 2-D weight view (out, in); x_prev carries the captured
    full-precision inputs, either (N, in) for linear layers or (N, in, m) for
    lowered conv layers. Returns the thresholded strategy (C == 0.5 maps to
    round-up) along with the final soft variables and a loss trace.
    """
    w = np.asarray(w, dtype=np.float32)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if x_prev.ndim == 2:
        x_prev = x_prev[:, :, None]
    if x_prev.ndim != 3 or x_prev.shape[1] != w.shape[1]:
        raise DimensionError(f"x_prev shape {x_prev.shape} incompatible with weight {w.shape}")

    _, state = quantize_nearest(w, cfg)
    c = state.c.astype(np.float64)
    e = state.e
    r_bar = state.r_bar.astype(np.float64)

    adam_m = np.zeros_like(c)
    adam_v = np.zeros_like(c)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    cycler = _BatchCycler(x_prev.shape[0], efrap_cfg.batch_size, [efrap_cfg.seed, layer_key])

    trace: list[tuple[int, float]] = []
    window: list[float] = []
    iterations_run = 0

    for it in range(1, efrap_cfg.iterations + 1):
        idx = cycler.next()
        x_cols = x_prev[idx].transpose(1, 0, 2).reshape(w.shape[1], -1)

        total = 0.0
        grad = np.zeros_like(c)
        with np.errstate(over="ignore", invalid="ignore"):
            if efrap_cfg.lambda_f:
                v, g = loss_flip(e, c, r_bar, efrap_cfg.eps_ce)
                total += efrap_cfg.lambda_f * v
                grad += efrap_cfg.lambda_f * g
            if efrap_cfg.lambda_a:
                v, g = loss_activation(w, c, cfg, x_cols)
                total += efrap_cfg.lambda_a * v
                grad += efrap_cfg.lambda_a * g
            if efrap_cfg.lambda_p:
                v, g = loss_penalty(c)
                total += efrap_cfg.lambda_p * v
                grad += efrap_cfg.lambda_p * g

        if not np.isfinite(total):
            raise OptimizationDivergedError(it)

        adam_m = beta1 * adam_m + (1 - beta1) * grad
        adam_v = beta2 * adam_v + (1 - beta2) * grad * grad
        m_hat = adam_m / (1 - beta1**it)
        v_hat = adam_v / (1 - beta2**it)
        c = np.clip(c - efrap_cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps), 0.0, 1.0)

        iterations_run = it
        if it == 1 or it % efrap_cfg.trace_every == 0 or it == efrap_cfg.iterations:
            trace.append((it, total))
        if efrap_cfg.early_stop:
            window.append(total)
            if len(window) > efrap_cfg.early_stop_window:
                ref = window.pop(0)
                if abs(total - ref) < efrap_cfg.early_stop_tol * max(abs(ref), 1e-12):
                    break

    strategy = (c >= 0.5).astype(np.int8)  # exact 0.5 rounds up
    return LayerResult(strategy=strategy, c=c, config=cfg, loss_trace=trace, iterations_run=iterations_run)


def _layer_weight_2d(layer) -> np.ndarray:
    w = layer.weight
    return w if layer.kind == "linear" else w.reshape(w.shape[0], -1)


def _layer_inputs_for_optimizer(layer, captured: np.ndarray) -> np.ndarray:
    """Shape captured activations for the layer's linear lowering."""
    if layer.kind == "linear":
        return captured
    k, s, p = layer.params["k"], layer.params["stride"], layer.params["padding"]
    return np.stack([im2col(sample, k, s, p) for sample in captured])


def _resolve_jobs(n_jobs) -> int:
    cap = int(os.environ.get("QUANTGUARD_THREADS", "0") or 0)
    jobs = 1 if n_jobs in (None, 0) else int(n_jobs)
    if cap > 0:
        jobs = min(jobs, cap)
    return max(jobs, 1)


def optimize_graph(
    graph: ModelGraph, calib, bits: int, efrap_cfg: EfrapConfig, n_jobs: int | None = None
) -> dict[int, LayerResult]:
    """Run the layer-wise optimization for every weighted layer of a graph.

    Layer problems are independent given full-precision activations, so they
    may run in parallel; results are identical to the sequential order.
    """
    if isinstance(calib, Dataset) and calib.samples.shape[0] == 0:
        raise ContractError("calibration set is empty")
    captured = capture_all_activations(graph, calib)

    def run(idx: int) -> tuple[int, LayerResult]:
        layer = graph.layers[idx]
        w2d = _layer_weight_2d(layer)
        cfg = make_config(layer.weight, bits, efrap_cfg.scheme, efrap_cfg.grid_size)
        x_prev = _layer_inputs_for_optimizer(layer, captured[idx])
        return idx, optimize_layer(w2d, cfg, x_prev, efrap_cfg, layer_key=idx)

    indices = graph.weighted_indices()
    jobs = _resolve_jobs(n_jobs)
    if jobs == 1:
        results = dict(run(i) for i in indices)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(run, indices))
    return results


def materialize_quantized_graph(
    graph: ModelGraph,
    configs: dict[int, QuantConfig],
    strategies: dict[int, np.ndarray],
    method: str,
    meta: dict | None = None,
) -> ModelGraph:
    """New graph with dequantized weights plus per-layer quantization records."""
    layers = []
    records = {}
    for idx, layer in enumerate(graph.layers):
        if idx in configs:
            strategy = np.asarray(strategies[idx]).reshape(layer.weight.shape)
            w_q = quantize_with_strategy(layer.weight, configs[idx], strategy)
            new_layer = replace(layer, weight=w_q, params=dict(layer.params))
            records[idx] = LayerQuantRecord(configs[idx], strategy.astype(np.int8), method)
            layers.append(new_layer)
        else:
            layers.append(replace(layer, params=dict(layer.params)))
    out = ModelGraph(layers, tuple(graph.input_shape), quantization=records, meta=dict(meta or {}))
    return out


def efrap_quantize(
    graph: ModelGraph, calib, bits: int, efrap_cfg: EfrapConfig | None = None,
    n_jobs: int | None = None,
) -> ModelGraph:
    """Quantize every weighted layer with its learned rounding strategy."""
    cfg = efrap_cfg or EfrapConfig()
    results = optimize_graph(graph, calib, bits, cfg, n_jobs)
    configs = {i: r.config for i, r in results.items()}
    strategies = {i: r.strategy.reshape(graph.layers[i].weight.shape) for i, r in results.items()}
    meta = {"method": "efrap", "bits": bits, "seed": cfg.seed}
    return materialize_quantized_graph(graph, configs, strategies, "efrap", meta)
