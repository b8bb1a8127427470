"""Checkpoint file format.

Layout of ``<name>.ckpt``::

    8 bytes   magic b"QRKDCKPT"
    4 bytes   header length H, uint32 little-endian
    H bytes   UTF-8 JSON header (sorted keys): architecture, seed,
              parameter_count, metadata, and the ordered parameter table
              [{"name", "shape", "offset", "count"}, ...]
    rest      parameters concatenated in table order as float64 little-endian

A text manifest ``<name>.ckpt.manifest.txt`` lists ``name shape`` per line.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..exceptions import FormatError
from ..fileio import atomic_write
from .model import Model, ModelSpec, parameter_count

MAGIC = b"QRKDCKPT"


def save_checkpoint(model: Model, path, seed: int | None = None, metadata: dict | None = None) -> Path:
    path = Path(path)
    table, blobs, offset = [], [], 0
    for name, tensor in model.params.items():
        arr = np.ascontiguousarray(tensor.values, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = {
        "architecture": model.spec.to_dict(),
        "seed": seed,
        "parameter_count": parameter_count(model),
        "metadata": metadata or {},
        "parameters": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    atomic_write(path, MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs))
    manifest = "".join(f"{t['name']} {tuple(t['shape'])}\n" for t in table)
    atomic_write(Path(str(path) + ".manifest.txt"), manifest.encode())
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:8] != MAGIC:
            raise FormatError(f"{path} is not a qrkd checkpoint")
        (hlen,) = struct.unpack("<I", head[8:])
        raw = fh.read(hlen)
    if len(raw) != hlen:
        raise OSError(f"{path}: truncated header")
    return json.loads(raw)


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, header)``."""
    header = read_header(path)
    data = Path(path).read_bytes()
    start = 12 + struct.unpack("<I", data[8:12])[0]
    expected = sum(entry["count"] for entry in header["parameters"])
    if len(data) - start != 8 * expected:
        raise OSError(f"{path}: parameter block holds {len(data) - start} bytes, expected {8 * expected}")
    flat = np.frombuffer(data, dtype="<f8", offset=start)
    spec = ModelSpec.from_dict(header["architecture"])
    model = Model.init(spec, np.random.default_rng(0))
    arrays = {}
    for entry in header["parameters"]:
        lo, hi = entry["offset"], entry["offset"] + entry["count"]
        if hi > flat.size:
            raise OSError(f"{path}: truncated parameter data")
        arrays[entry["name"]] = flat[lo:hi].reshape(entry["shape"]).astype(np.float64)
    if set(arrays) != set(model.params):
        raise FormatError("checkpoint parameters do not match the stored architecture")
    model.load_arrays(arrays)
    return model, header
