"""Writer/reader for the engine's EFQM/EFQD containers.

Implemented independently against docs/format.md (magic, u16 version, u32
little-endian JSON header length, UTF-8 JSON header, raw little-endian f32
blobs, trailing CRC32).
"""

from __future__ import annotations

import json
import zlib

import numpy as np

VERSION = 1


def _pack(magic: bytes, header: dict, blobs: list[np.ndarray]) -> bytes:
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = magic + VERSION.to_bytes(2, "little") + len(header_bytes).to_bytes(4, "little")
    out += header_bytes
    for blob in blobs:
        out += np.ascontiguousarray(blob, dtype="<f4").tobytes()
    return out + (zlib.crc32(out) & 0xFFFFFFFF).to_bytes(4, "little")


def write_model(path, input_shape, layer_entries: list[dict], tensors: list[tuple[str, np.ndarray]]):
    """layer_entries reference tensors by name; offsets are assigned here."""
    table, blobs, offset = [], [], 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr)
        offset += arr.nbytes
    header = {"input_shape": list(input_shape), "layers": layer_entries, "tensors": table}
    with open(path, "wb") as fh:
        fh.write(_pack(b"EFQM", header, blobs))


def write_dataset(path, samples: np.ndarray, labels=None, trigger_target=None):
    samples = np.ascontiguousarray(samples, dtype=np.float32)
    header = {
        "tensors": [{"name": "samples", "shape": list(samples.shape), "offset": 0, "nbytes": samples.nbytes}],
        "labels": None if labels is None else [int(v) for v in labels],
        "trigger_target": None if trigger_target is None else int(trigger_target),
    }
    with open(path, "wb") as fh:
        fh.write(_pack(b"EFQD", header, [samples]))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse either container kind; returns (header, tensors by name)."""
    raw = open(path, "rb").read()
    if raw[:4] not in (b"EFQM", b"EFQD"):
        raise ValueError(f"unexpected magic {raw[:4]!r}")
    if int.from_bytes(raw[4:6], "little") != VERSION:
        raise ValueError("unsupported version")
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != int.from_bytes(raw[-4:], "little"):
        raise ValueError("CRC mismatch")
    hlen = int.from_bytes(raw[6:10], "little")
    header = json.loads(raw[10 : 10 + hlen].decode())
    blob = raw[10 + hlen : -4]
    tensors = {}
    for ent in header.get("tensors", []):
        shape = tuple(ent["shape"])
        start = ent["offset"]
        tensors[ent["name"]] = np.frombuffer(blob[start : start + ent["nbytes"]], dtype="<f4").reshape(shape).copy()
    return header, tensors
