"""Model and dataset containers, bit-exact.

Layout (all integers little-endian):

    magic      4 bytes   "EFQM" (model) or "EFQD" (dataset)
    version    u16       currently 1
    hlen       u32       byte length of the JSON header
    header     hlen      UTF-8 JSON: layers / shapes / tensor offsets
    blobs      ...       concatenated raw little-endian float32 tensors
    crc        u32       CRC32 of every byte preceding it

Tensor offsets in the header are relative to the start of the blob region.
See docs/format.md for a hex-annotated example.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_labels
from .errors import (
    BadMagicError,
    ChecksumError,
    HeaderError,
    ShapeIncompatibilityError,
    TruncatedFileError,
    VersionMismatchError,
)
from .quantize import QuantConfig

MAGIC_MODEL = b"EFQM"
MAGIC_DATASET = b"EFQD"
MAGIC_PACKED = b"EFQI"
VERSION = 1

WEIGHTED_KINDS = ("linear", "conv2d")
LAYER_KINDS = WEIGHTED_KINDS + ("relu", "maxpool", "avgpool", "flatten", "residual_add")


@dataclass
class Layer:
    kind: str
    params: dict = field(default_factory=dict)
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS


def linear(weight, bias=None) -> Layer:
    w = np.asarray(weight, dtype=np.float32)
    b = None if bias is None else np.asarray(bias, dtype=np.float32)
    return Layer("linear", {"in": w.shape[1], "out": w.shape[0]}, w, b)


def conv2d(weight, bias=None, stride: int = 1, padding: int = 0) -> Layer:
    w = np.asarray(weight, dtype=np.float32)
    b = None if bias is None else np.asarray(bias, dtype=np.float32)
    params = {
        "in_channels": w.shape[1],
        "out_channels": w.shape[0],
        "k": w.shape[2],
        "stride": stride,
        "padding": padding,
    }
    return Layer("conv2d", params, w, b)


def relu() -> Layer:
    return Layer("relu")


def maxpool(k: int, stride: int) -> Layer:
    return Layer("maxpool", {"k": k, "stride": stride})


def avgpool(k: int, stride: int) -> Layer:
    return Layer("avgpool", {"k": k, "stride": stride})


def flatten() -> Layer:
    return Layer("flatten")


def residual_add(source: int) -> Layer:
    return Layer("residual_add", {"source": source})


@dataclass
class LayerQuantRecord:
    """How one weighted layer was quantized: scale config plus the 0/1 strategy."""

    config: QuantConfig
    strategy: np.ndarray
    method: str = "nearest"


@dataclass
class ModelGraph:
    layers: list[Layer]
    input_shape: tuple[int, ...]
    quantization: dict[int, LayerQuantRecord] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def weighted_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.weighted]

    def infer_shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer; raises if the chain is inconsistent."""
        shapes = []
        cur = tuple(int(d) for d in self.input_shape)
        for idx, layer in enumerate(self.layers):
            kind = layer.kind
            if kind == "linear":
                if len(cur) != 1 or cur[0] != layer.weight.shape[1]:
                    raise ShapeIncompatibilityError(
                        f"layer {idx} (linear) expects ({layer.weight.shape[1]},), got {cur}"
                    )
                cur = (layer.weight.shape[0],)
            elif kind == "conv2d":
                k, s, p = layer.params["k"], layer.params["stride"], layer.params["padding"]
                if len(cur) != 3 or cur[0] != layer.weight.shape[1]:
                    raise ShapeIncompatibilityError(
                        f"layer {idx} (conv2d) expects ({layer.weight.shape[1]},H,W), got {cur}"
                    )
                h_out = (cur[1] + 2 * p - k) // s + 1
                w_out = (cur[2] + 2 * p - k) // s + 1
                if h_out < 1 or w_out < 1 or k > cur[1] + 2 * p or k > cur[2] + 2 * p:
                    raise ShapeIncompatibilityError(f"layer {idx} (conv2d) kernel {k} too large for {cur}")
                cur = (layer.weight.shape[0], h_out, w_out)
            elif kind == "relu":
                pass
            elif kind in ("maxpool", "avgpool"):
                k, s = layer.params["k"], layer.params["stride"]
                if len(cur) != 3 or k > cur[1] or k > cur[2]:
                    raise ShapeIncompatibilityError(f"layer {idx} ({kind}) incompatible with {cur}")
                cur = (cur[0], (cur[1] - k) // s + 1, (cur[2] - k) // s + 1)
            elif kind == "flatten":
                cur = (int(np.prod(cur)),)
            elif kind == "residual_add":
                src = layer.params["source"]
                if not (0 <= src < idx):
                    raise ShapeIncompatibilityError(f"layer {idx} residual source {src} out of range")
                if shapes[src] != cur:
                    raise ShapeIncompatibilityError(
                        f"layer {idx} residual shapes differ: {shapes[src]} vs {cur}"
                    )
            else:
                raise HeaderError(f"unknown layer kind {kind!r}")
            shapes.append(cur)
        return shapes

    def validate(self) -> "ModelGraph":
        self.infer_shapes()
        for idx, layer in enumerate(self.layers):
            if layer.weight is not None and not np.isfinite(layer.weight).all():
                raise HeaderError(f"layer {idx} weight contains non-finite values")
            if layer.bias is not None and not np.isfinite(layer.bias).all():
                raise HeaderError(f"layer {idx} bias contains non-finite values")
        return self

    def num_classes(self) -> int:
        return int(self.infer_shapes()[-1][0])


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray | None = None
    trigger_target: int | None = None

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.labels is not None:
            self.labels = check_labels(self.labels)
            if len(self.labels) != len(self.samples):
                raise HeaderError("labels length disagrees with sample count")


def graphs_equal(a: ModelGraph, b: ModelGraph) -> bool:
    if tuple(a.input_shape) != tuple(b.input_shape) or len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.kind != lb.kind or la.params != lb.params:
            return False
        for ta, tb in ((la.weight, lb.weight), (la.bias, lb.bias)):
            if (ta is None) != (tb is None):
                return False
            if ta is not None and (ta.shape != tb.shape or not np.array_equal(ta, tb)):
                return False
    if set(a.quantization) != set(b.quantization):
        return False
    for i, ra in a.quantization.items():
        rb = b.quantization[i]
        if ra.config != rb.config or ra.method != rb.method:
            return False
        if not np.array_equal(ra.strategy, rb.strategy):
            return False
    return a.meta == b.meta


# ---------------------------------------------------------------------------
# serialization


def _strategy_to_text(strategy: np.ndarray) -> str:
    return "".join("1" if v else "0" for v in np.asarray(strategy).reshape(-1))


def _strategy_from_text(text: str, shape) -> np.ndarray:
    if len(text) != int(np.prod(shape)):
        raise HeaderError("strategy text length disagrees with weight shape")
    if set(text) - {"0", "1"}:
        raise HeaderError("strategy text must be 0/1")
    return np.frombuffer(text.encode(), dtype=np.uint8).reshape(shape) - ord("0")


def _pack(magic: bytes, header: dict, blobs: list[np.ndarray]) -> bytes:
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(b, dtype=np.float32).tobytes() for b in blobs)
    out = magic + VERSION.to_bytes(2, "little") + len(header_bytes).to_bytes(4, "little")
    out += header_bytes + body
    return out + (zlib.crc32(out) & 0xFFFFFFFF).to_bytes(4, "little")


def _unpack(raw: bytes, magic: bytes) -> tuple[dict, bytes]:
    if len(raw) < 14:
        raise TruncatedFileError(f"file too short ({len(raw)} bytes)")
    if raw[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {raw[:4]!r}")
    version = int.from_bytes(raw[4:6], "little")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported container version {version}")
    hlen = int.from_bytes(raw[6:10], "little")
    if 10 + hlen + 4 > len(raw):
        raise TruncatedFileError("declared header extends past end of file")
    declared_crc = int.from_bytes(raw[-4:], "little")
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != declared_crc:
        raise ChecksumError("CRC32 mismatch")
    try:
        header = json.loads(raw[10 : 10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}") from None
    return header, raw[10 + hlen : -4]


def _read_tensors(header: dict, blob: bytes) -> dict[str, np.ndarray]:
    entries = header.get("tensors", [])
    tensors = {}
    expected_end = 0
    for ent in entries:
        shape = tuple(int(d) for d in ent["shape"])
        nbytes = int(ent["nbytes"])
        if nbytes != int(np.prod(shape)) * 4:
            raise HeaderError(
                f"tensor {ent['name']!r} declares {nbytes} bytes but shape {shape} needs {int(np.prod(shape)) * 4}"
            )
        off = int(ent["offset"])
        if off + nbytes > len(blob):
            raise TruncatedFileError(f"tensor {ent['name']!r} extends past the blob region")
        arr = np.frombuffer(blob[off : off + nbytes], dtype="<f4").reshape(shape).copy()
        tensors[ent["name"]] = arr
        expected_end = max(expected_end, off + nbytes)
    if expected_end != len(blob):
        raise TruncatedFileError(
            f"blob region has {len(blob)} bytes but tensors account for {expected_end}"
        )
    return tensors


def _graph_header_and_blobs(graph: ModelGraph) -> tuple[dict, list[np.ndarray]]:
    layers_json, tensors_json, blobs = [], [], []
    offset = 0

    def add_tensor(name: str, arr: np.ndarray) -> str:
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        tensors_json.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes}
        )
        blobs.append(arr)
        offset += arr.nbytes
        return name

    for idx, layer in enumerate(graph.layers):
        entry = {"kind": layer.kind, **layer.params}
        if layer.weight is not None:
            entry["weight"] = add_tensor(f"layer{idx}.weight", layer.weight)
        if layer.bias is not None:
            entry["bias"] = add_tensor(f"layer{idx}.bias", layer.bias)
        layers_json.append(entry)

    header = {"input_shape": list(graph.input_shape), "layers": layers_json, "tensors": tensors_json}
    if graph.quantization:
        header["quantization"] = {
            str(i): {
                "config": rec.config.to_dict(),
                "method": rec.method,
                "strategy": _strategy_to_text(rec.strategy),
            }
            for i, rec in sorted(graph.quantization.items())
        }
    if graph.meta:
        header["meta"] = graph.meta
    return header, blobs


def model_to_bytes(graph: ModelGraph) -> bytes:
    graph.validate()
    header, blobs = _graph_header_and_blobs(graph)
    return _pack(MAGIC_MODEL, header, blobs)


def model_from_bytes(raw: bytes) -> ModelGraph:
    header, blob = _unpack(raw, MAGIC_MODEL)
    tensors = _read_tensors(header, blob)
    layers = []
    for idx, ent in enumerate(header.get("layers", [])):
        kind = ent.get("kind")
        if kind not in LAYER_KINDS:
            raise HeaderError(f"layer {idx} has unknown kind {kind!r}")
        params = {k: v for k, v in ent.items() if k not in ("kind", "weight", "bias")}
        weight = tensors[ent["weight"]] if "weight" in ent else None
        bias = tensors[ent["bias"]] if "bias" in ent else None
        if kind in WEIGHTED_KINDS and weight is None:
            raise HeaderError(f"layer {idx} ({kind}) is missing its weight tensor")
        layers.append(Layer(kind, params, weight, bias))
    if "input_shape" not in header:
        raise HeaderError("model header lacks input_shape")
    graph = ModelGraph(layers, tuple(int(d) for d in header["input_shape"]))
    for key, rec in header.get("quantization", {}).items():
        idx = int(key)
        if idx >= len(layers) or layers[idx].weight is None:
            raise HeaderError(f"quantization record for non-weighted layer {idx}")
        cfg = QuantConfig.from_dict(rec["config"])
        strategy = _strategy_from_text(rec["strategy"], layers[idx].weight.shape)
        graph.quantization[idx] = LayerQuantRecord(cfg, strategy.astype(np.int8), rec.get("method", "nearest"))
    graph.meta = header.get("meta", {})
    graph.validate()
    return graph


def dataset_to_bytes(ds: Dataset) -> bytes:
    samples = np.ascontiguousarray(ds.samples, dtype=np.float32)
    header = {
        "tensors": [
            {"name": "samples", "shape": list(samples.shape), "offset": 0, "nbytes": samples.nbytes}
        ],
        "labels": None if ds.labels is None else [int(v) for v in ds.labels],
        "trigger_target": None if ds.trigger_target is None else int(ds.trigger_target),
    }
    return _pack(MAGIC_DATASET, header, [samples])


def dataset_from_bytes(raw: bytes) -> Dataset:
    header, blob = _unpack(raw, MAGIC_DATASET)
    tensors = _read_tensors(header, blob)
    if "samples" not in tensors:
        raise HeaderError("dataset header lacks a samples tensor")
    labels = header.get("labels")
    return Dataset(tensors["samples"], labels, header.get("trigger_target"))


def save_model(graph: ModelGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(graph))


def load_model(path) -> ModelGraph:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# packed-integer export ("EFQI"): same framing, integer weight blobs


def packed_model_to_bytes(graph: ModelGraph) -> bytes:
    """Serialize a quantized graph with integer weight codes.

    Weights become int8 blobs (two codes per byte, low nibble first, for
    bit-widths <= 4); biases stay float32. Requires a quantization record for
    every weighted layer.
    """
    from .quantize import quantize_to_int

    graph.validate()
    missing = [i for i in graph.weighted_indices() if i not in graph.quantization]
    if missing:
        raise HeaderError(f"packed export needs quantization records for layers {missing}")

    layers_json, tensors_json, blobs = [], [], []
    offset = 0

    def add_blob(name: str, payload: bytes, shape, dtype: str):
        nonlocal offset
        tensors_json.append(
            {"name": name, "shape": list(shape), "offset": offset, "nbytes": len(payload), "dtype": dtype}
        )
        blobs.append(payload)
        offset += len(payload)
        return name

    for idx, layer in enumerate(graph.layers):
        entry = {"kind": layer.kind, **layer.params}
        if layer.weight is not None:
            rec = graph.quantization[idx]
            codes = quantize_to_int(layer.weight, rec.config, rec.strategy)
            if rec.config.bits <= 4:
                flat = codes.reshape(-1) & 0xF
                if flat.size % 2:
                    flat = np.concatenate([flat, np.zeros(1, dtype=flat.dtype)])
                packed = (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8)
                entry["weight"] = add_blob(f"layer{idx}.weight", packed.tobytes(), codes.shape, "i4")
            else:
                entry["weight"] = add_blob(
                    f"layer{idx}.weight", codes.astype(np.int8).tobytes(), codes.shape, "i8"
                )
            entry["quant"] = rec.config.to_dict()
        if layer.bias is not None:
            bias = np.ascontiguousarray(layer.bias, dtype=np.float32)
            entry["bias"] = add_blob(f"layer{idx}.bias", bias.tobytes(), bias.shape, "f32")
        layers_json.append(entry)

    header = {"input_shape": list(graph.input_shape), "layers": layers_json, "tensors": tensors_json}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = MAGIC_PACKED + VERSION.to_bytes(2, "little") + len(header_bytes).to_bytes(4, "little")
    out += header_bytes + b"".join(blobs)
    return out + (zlib.crc32(out) & 0xFFFFFFFF).to_bytes(4, "little")


def save_packed_model(graph: ModelGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(packed_model_to_bytes(graph))
