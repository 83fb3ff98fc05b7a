"""Binary checkpoint container.

Layout::

    b"CATSCKPT"  u32 version  u64 header_length  header (UTF-8 JSON)  buffers

The header holds the model config, free-form metadata, optimizer scalars and
one entry per array (kind, name, shape, little-endian dtype, offset, nbytes).
Buffers follow back to back.  The JSON is written with sorted keys, so
saving the same state twice gives the same bytes.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamState
from .params import ParameterSet

MAGIC = b"CATSCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ParameterSet
    config: dict | None = None
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)


def _entries(params: ParameterSet, adam: AdamState | None):
    for name, t in params.items():
        yield "param", name, t.data
    for name, b in params.buffers.items():
        yield "buffer", name, b
    if adam is not None:
        for name in adam.m:
            yield "adam_m", name, adam.m[name]
            yield "adam_v", name, adam.v[name]


def save_checkpoint(path, params: ParameterSet, config: dict | None = None,
                    adam: AdamState | None = None, meta: dict | None = None) -> None:
    """Write atomically (temp file, then rename)."""
    entries, blobs, offset = [], [], 0
    for kind, name, arr in _entries(params, adam):
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"kind": kind, "name": name, "shape": list(arr.shape),
                        "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"config": config, "meta": meta or {}, "entries": entries,
              "adam": adam.hyper() if adam is not None else None}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format version {version}, "
                                     f"this build reads version {VERSION}")
    start = _PREFIX.size + head_len
    if start > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None

    params = ParameterSet()
    hyper = header.get("adam")
    adam = AdamState(**hyper) if hyper is not None else None
    for e in header["entries"]:
        lo = start + e["offset"]
        if lo + e["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])),
                            offset=lo).reshape(e["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        kind = e["kind"]
        if kind == "param":
            params.add(e["name"], arr)
        elif kind == "buffer":
            params.buffers[e["name"]] = arr
        elif kind in ("adam_m", "adam_v") and adam is not None:
            (adam.m if kind == "adam_m" else adam.v)[e["name"]] = arr
        else:
            raise CheckpointError(f"{path}: unknown entry kind {kind!r}")
    return Checkpoint(params, header.get("config"), adam, header.get("meta") or {})
