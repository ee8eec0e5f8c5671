"""Independent brute-force reference implementations used as test oracles.

Everything here is written as plain scalar loops so it shares no code path
with the library. Float32 accumulation is made explicit (one multiply
rounding, one add rounding per term, left-to-right) to match the library's
documented accumulation order.
"""

import numpy as np


def matmul_naive(a, b):
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for t in range(k):
                acc = np.float32(acc + np.float32(a[i, t] * b[t, j]))
            out[i, j] = acc
    return out


def conv2d_naive(x, w, stride=1, padding=0):
    """Cross-correlation accumulated channel-major, then kernel row, then column."""
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    c_out, c_in, k, _ = w.shape
    c, h, wd = x.shape
    assert c == c_in
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, h_out, w_out), dtype=np.float32)
    for co in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                acc = np.float32(0.0)
                for ch in range(c_in):
                    for ki in range(k):
                        for kj in range(k):
                            acc = np.float32(
                                acc + np.float32(x[ch, i * stride + ki, j * stride + kj] * w[co, ch, ki, kj])
                            )
                out[co, i, j] = acc
    return out


def forward_naive(graph, batch):
    """Layer-by-layer full-precision evaluation of a model graph.

    Returns (logits, trace) where trace[i] is the input that layer i saw.
    Uses the scalar-loop kernels above for linear/conv layers.
    """
    outputs = []
    logits = []
    traces = None
    for sample in np.asarray(batch, dtype=np.float32):
        x = sample
        layer_outputs = []
        sample_trace = []
        for layer in graph.layers:
            sample_trace.append(x)
            kind = layer.kind
            if kind == "linear":
                y = matmul_naive(x.reshape(1, -1), layer.weight.T)[0]
                if layer.bias is not None:
                    y = np.float32(y + layer.bias)
                x = y
            elif kind == "conv2d":
                y = conv2d_naive(x, layer.weight, layer.params["stride"], layer.params["padding"])
                if layer.bias is not None:
                    y = (y.astype(np.float32).T + layer.bias).T.astype(np.float32)
                x = y
            elif kind == "relu":
                x = np.maximum(x, np.float32(0.0))
            elif kind in ("maxpool", "avgpool"):
                k, s = layer.params["k"], layer.params["stride"]
                c, h, w = x.shape
                h_out = (h - k) // s + 1
                w_out = (w - k) // s + 1
                y = np.zeros((c, h_out, w_out), dtype=np.float32)
                for ch in range(c):
                    for i in range(h_out):
                        for j in range(w_out):
                            win = x[ch, i * s : i * s + k, j * s : j * s + k]
                            if kind == "maxpool":
                                y[ch, i, j] = win.max()
                            else:
                                acc = np.float32(0.0)
                                for ki in range(k):
                                    for kj in range(k):
                                        acc = np.float32(acc + win[ki, kj])
                                y[ch, i, j] = np.float32(acc / np.float32(k * k))
                x = y
            elif kind == "flatten":
                x = x.reshape(-1)
            elif kind == "residual_add":
                x = np.float32(x + layer_outputs[layer.params["source"]])
            else:
                raise AssertionError(f"unknown layer kind {kind}")
            layer_outputs.append(x)
        logits.append(x)
        if traces is None:
            traces = [[] for _ in sample_trace]
        for i, t in enumerate(sample_trace):
            traces[i].append(t)
        outputs.append(layer_outputs)
    stacked_traces = [np.stack(t) for t in traces]
    return np.stack(logits), stacked_traces


def minmax_naive(values):
    flat = np.asarray(values).reshape(-1)
    lo, hi = flat[0], flat[0]
    for v in flat[1:]:
        lo = min(lo, v)
        hi = max(hi, v)
    return float(lo), float(hi)
