"""Binary checkpoint format.

Layout::

    b"RFCK"                      magic
    uint32 little-endian         header length H
    H bytes                      UTF-8 JSON header
    payload                      float64 little-endian arrays in header order
    32 bytes                     SHA-256 of everything above

The header holds the format version, the network spec and its hash, and for
every stored parameter vector a layer table ``[layer_id, role, shape]``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import NetworkSpec, ParamVector

MAGIC = b"RFCK"
FORMAT_VERSION = 1
VECTORS = ("params", "averaged", "momentum")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: ParamVector
    epoch: int = 0
    averaged: ParamVector | None = None
    momentum: ParamVector | None = None
    rng_state: dict | None = None
    metrics: dict = field(default_factory=dict)


def _layer_table(p: ParamVector) -> list:
    return [[lid, role, list(arr.shape)] for (lid, role), arr in p.items()]


def to_bytes(ckpt: Checkpoint) -> bytes:
    tables = {}
    payload = bytearray()
    for name in VECTORS:
        vec = getattr(ckpt, name)
        if vec is None:
            continue
        tables[name] = _layer_table(vec)
        for arr in vec.entries.values():
            payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    header = {
        "version": FORMAT_VERSION,
        "spec": ckpt.spec.to_dict(),
        "spec_hash": ckpt.spec.digest(),
        "epoch": ckpt.epoch,
        "tables": tables,
        "rng_state": ckpt.rng_state,
        "metrics": ckpt.metrics,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<I", len(hbytes)) + hbytes + bytes(payload)
    return body + hashlib.sha256(body).digest()


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC) + 4 + 32 or raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch")
    (hlen,) = struct.unpack("<I", body[4:8])
    header = json.loads(body[8 : 8 + hlen].decode())
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})")
    spec = NetworkSpec.from_dict(header["spec"])
    if spec.digest() != header["spec_hash"]:
        raise CheckpointError("network spec hash mismatch")
    pos = 8 + hlen
    vecs = {}
    for name in VECTORS:
        table = header["tables"].get(name)
        if table is None:
            continue
        pv = ParamVector()
        for lid, role, shape in table:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pv[(int(lid), role)] = arr
            pos += 8 * n
        vecs[name] = pv
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint payload")
    return Checkpoint(
        spec=spec,
        params=vecs["params"],
        epoch=header["epoch"],
        averaged=vecs.get("averaged"),
        momentum=vecs.get("momentum"),
        rng_state=header["rng_state"],
        metrics=header["metrics"],
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw)


def model_params(ckpt: Checkpoint) -> ParamVector:
    """The weights to evaluate: the running average when one is stored."""
    return ckpt.averaged if ckpt.averaged is not None else ckpt.params
