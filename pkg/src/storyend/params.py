"""Named registry of trainable tensors and binary checkpoint I/O.

Checkpoint layout (little-endian):
    bytes 0..7    magic b"SENDCKP1"
    bytes 8..11   uint32 header length H
    bytes 12..12+H  UTF-8 JSON header:
        {"meta": {...}, "tensors": [{"name": str, "shape": [int, ...]}, ...]}
    remainder     raw float64 little-endian data, C order, in header order

Round-tripping a checkpoint is bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

_MAGIC = b"SENDCKP1"


class ModelParams:
    """Insertion-ordered name -> Tensor registry for all trainable state."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name, tensor):
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    def n_scalars(self):
        return sum(t.size for t in self._tensors.values())


def save_checkpoint(path, params, meta=None):
    header = {
        "meta": meta or {},
        "tensors": [
            {"name": name, "shape": list(t.data.shape)} for name, t in params.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint file; returns (ModelParams, meta dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a storyend checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    params = ModelParams()
    offset = 12 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated data for tensor {entry['name']}")
        data = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        params.add(entry["name"], Tensor(data))
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, header.get("meta", {})


def check_shapes(params, expected):
    """Raise CheckpointError listing every tensor whose shape disagrees."""
    bad = []
    for name, shape in expected.items():
        if name not in params:
            bad.append(f"{name}: missing")
        elif params[name].data.shape != tuple(shape):
            bad.append(f"{name}: got {params[name].data.shape}, want {tuple(shape)}")
    for name, _ in params.items():
        if name not in expected:
            bad.append(f"{name}: unexpected")
    if bad:
        raise CheckpointError("checkpoint/config shape mismatch: " + "; ".join(sorted(bad)))
