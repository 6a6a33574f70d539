"""Versioned binary container for checkpoints and pruned-model artifacts.

Layout (all integers little-endian)::

    8 bytes   magic  b"OCSPRUNE"
    u32       format version
    u64       manifest length in bytes
    ...       manifest, UTF-8 JSON
    ...       tensor payload, concatenated in manifest order

The manifest lists every tensor as ``{section, name, dtype, shape, offset, nbytes}``
with dtype ``<f4`` (training runs) or ``<f8`` (64-bit test runs), plus the model
spec and free-form metadata.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"OCSPRUNE"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def save_container(path, model_spec: dict, sections: dict[str, dict[str, np.ndarray]],
                   meta: dict, kind: str) -> None:
    entries, blobs, offset = [], [], 0
    for section, tensors in sections.items():
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            code = arr.dtype.newbyteorder("<").str
            if code not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {section}/{name}")
            data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
            entries.append({"section": section, "name": name, "dtype": code,
                            "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "model_spec": model_spec,
                "tensors": entries, "meta": meta}
    head = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_container(path):
    """Return ``(kind, model_spec, sections, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an ocsprune container")
    version, mlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    manifest = json.loads(raw[20:20 + mlen])
    base = 20 + mlen
    sections: dict[str, dict[str, np.ndarray]] = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        chunk = raw[start:start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['section']}/{e['name']}")
        arr = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        sections.setdefault(e["section"], {})[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return manifest["kind"], manifest["model_spec"], sections, manifest["meta"]


@dataclass
class Checkpoint:
    model_spec: dict
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    epoch: int                      # next epoch to run
    state: dict = field(default_factory=dict)   # stability, penalty, run bookkeeping, seed
    format_version: int = FORMAT_VERSION

    def save(self, path) -> None:
        save_container(path, self.model_spec, {"params": self.params, "momentum": self.momentum},
                       {"epoch": self.epoch, "state": self.state}, kind="checkpoint")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        kind, spec, sections, meta = load_container(path)
        if kind != "checkpoint":
            raise CheckpointError(f"{path}: expected a checkpoint, found {kind!r}")
        return cls(spec, sections.get("params", {}), sections.get("momentum", {}),
                   meta["epoch"], meta["state"])


def save_model(path, model_spec: dict, params: dict[str, np.ndarray], meta: dict | None = None):
    save_container(path, model_spec, {"params": params}, meta or {}, kind="model")


def load_model(path):
    """Params from either a model artifact or a checkpoint: ``(model_spec, params)``."""
    kind, spec, sections, _ = load_container(path)
    return spec, sections["params"]
