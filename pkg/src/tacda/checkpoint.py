"""Self-describing binary checkpoints.

Layout: ``b"TACDCKPT"`` | u32 version | u64 header length | UTF-8 JSON header |
float64 little-endian payload.  The header names every tensor with its shape
and carries the architecture, optimizer scalars, config, config hash and a
SHA-256 of the payload, so truncation or corruption is caught on load.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .nn import Architecture, ModelBundle, OptimizerState

MAGIC = b"TACDCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    bundle: ModelBundle
    optimizers: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    meta: dict = field(default_factory=dict)


def _tensors(ckpt: Checkpoint):
    for group in sorted(ckpt.bundle.groups):
        for name in sorted(ckpt.bundle.groups[group]):
            yield f"param/{group}/{name}", ckpt.bundle.groups[group][name]
    for group in sorted(ckpt.optimizers):
        st = ckpt.optimizers[group]
        for moment in ("m", "v"):
            table = getattr(st, moment)
            for name in sorted(table):
                yield f"opt/{group}/{moment}/{name}", np.asarray(table[name])


def dumps(ckpt: Checkpoint) -> bytes:
    entries, chunks = [], []
    for name, arr in _tensors(ckpt):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    header = {
        "architecture": ckpt.bundle.arch.to_dict(),
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "meta": ckpt.meta,
        "optimizers": {g: {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "step": s.step}
                       for g, s in sorted(ckpt.optimizers.items())},
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload


def loads(raw: bytes, expected_config_hash: Optional[str] = None) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint: header prefix incomplete")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"corrupt header: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file is v{version}, reader supports v{VERSION}")
    start = _PREFIX.size + head_len
    if len(raw) < start:
        raise CheckpointError("truncated checkpoint: JSON header incomplete")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    payload = raw[start:]
    expected = sum(8 * int(np.prod(e["shape"])) for e in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(f"truncated checkpoint: payload {len(payload)} bytes, expected {expected}")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("corrupt payload: checksum mismatch")
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {header['config_hash'][:12]} vs requested "
            f"{expected_config_hash[:12]}; refusing to resume with a different configuration"
        )

    groups, optimizers = {}, {}
    for g, s in header["optimizers"].items():
        optimizers[g] = OptimizerState(lr=s["lr"], beta1=s["beta1"], beta2=s["beta2"], eps=s["eps"],
                                       step=s["step"])
    offset = 0
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"]))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
        arr = arr.reshape(entry["shape"]).astype(np.float64)
        offset += 8 * n
        kind, rest = entry["name"].split("/", 1)
        if kind == "param":
            group, name = rest.split("/", 1)
            groups.setdefault(group, {})[name] = arr
        else:
            group, moment, name = rest.split("/", 2)
            getattr(optimizers[group], moment)[name] = arr
    bundle = ModelBundle(Architecture.from_dict(header["architecture"]), groups)
    return Checkpoint(bundle, optimizers, header["config"], header["config_hash"], header["meta"])


def checkpoint_save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ckpt))
    return path


def checkpoint_load(path, expected_config_hash: Optional[str] = None) -> Checkpoint:
    return loads(Path(path).read_bytes(), expected_config_hash)
