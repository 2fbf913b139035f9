"""GZRL-CKPT policy checkpoints.

    magic    9 bytes b"GZRL-CKPT"
    version  u32
    config   u32 byte length, then UTF-8 JSON {"dims": ..., "experiment": ...} (sorted keys);
             "experiment" is the full run config snapshot, or null
    count    u32 number of tensors
    tensors  u32 name length, UTF-8 name, u32 ndim, ndim x u32 dims, float32 data

Little-endian throughout; tensors are row-major.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .dataset import FormatError, _Reader, atomic_write
from .policy import PARAM_NAMES, PolicyDims, PolicyParams

MAGIC = b"GZRL-CKPT"
VERSION = 1


def encode_checkpoint(params: PolicyParams, experiment: dict | None = None) -> bytes:
    block = {"dims": params.dims.as_dict(), "experiment": experiment}
    cfg = json.dumps(block, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(PARAM_NAMES))]
    for name, tensor in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> PolicyParams:
    return decode_checkpoint_full(buf)[0]


def decode_checkpoint_full(buf: bytes) -> tuple[PolicyParams, dict | None]:
    """Parameters plus the stored experiment snapshot (None when absent)."""
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a GZRL-CKPT file: bad magic", 0)
    version, n_cfg = r.unpack("II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", len(MAGIC))
    at = r.pos
    try:
        block = json.loads(r.take(n_cfg).decode("utf-8"))
        dims = PolicyDims(**block["dims"])
        experiment = block.get("experiment")
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, KeyError, AttributeError) as exc:
        raise FormatError(f"unreadable config block: {exc}", at) from None
    (count,) = r.unpack("I")
    expected = dims.shapes()
    tensors = {}
    for _ in range(count):
        at = r.pos
        (n_name,) = r.unpack("I")
        name = r.take(n_name).decode("utf-8", errors="replace")
        if name not in expected:
            raise FormatError(f"unexpected tensor {name!r}", at)
        arr = r.tensor()
        if arr.shape != expected[name]:
            raise FormatError(f"tensor {name} has shape {arr.shape}, config implies {expected[name]}", at)
        tensors[name] = arr.astype(np.float64)
    if set(tensors) != set(expected):
        raise FormatError(f"missing tensors {sorted(set(expected) - set(tensors))}", r.pos)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return PolicyParams(dims, tensors), experiment


def save_checkpoint(params: PolicyParams, path, experiment: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(params, experiment))


def load_checkpoint(path) -> PolicyParams:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def load_checkpoint_full(path) -> tuple[PolicyParams, dict | None]:
    with open(path, "rb") as fh:
        return decode_checkpoint_full(fh.read())
