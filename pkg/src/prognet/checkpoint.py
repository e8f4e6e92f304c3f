"""Versioned binary checkpoint container.

Layout, all integers little-endian:

    magic        4 bytes   b"PNCK"
    version      u32       currently 1
    header_len   u32
    header       UTF-8 JSON, canonical key order:
                 kind, config_digest, epoch, metric, extra
    param_count  u32
    per parameter, sorted by name:
        name_len u16, name UTF-8, ndim u8, dims u32 * ndim,
        payload  float32 raw values
    checksum     32 bytes, SHA-256 of everything above

Canonical JSON plus sorted parameter order makes save -> load -> save
byte-identical, and the trailing digest rejects any corruption.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

MAGIC = b"PNCK"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or mismatched checkpoint file."""


@dataclass
class Checkpoint:
    kind: str  # "model" | "controller"
    config_digest: str
    params: dict  # name -> float32 ndarray
    epoch: int = 0
    metric: Optional[float] = None
    extra: Optional[dict] = None


def _header_bytes(ck: Checkpoint) -> bytes:
    header = {
        "kind": ck.kind,
        "config_digest": ck.config_digest,
        "epoch": int(ck.epoch),
        "metric": None if ck.metric is None else float(ck.metric),
        "extra": ck.extra or {},
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(ck: Checkpoint, path: str) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    header = _header_bytes(ck)
    chunks.append(struct.pack("<I", len(header)))
    chunks.append(header)
    chunks.append(struct.pack("<I", len(ck.params)))
    for name in sorted(ck.params):
        arr = np.asarray(ck.params[name], dtype=np.float32, order="C")
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f4").tobytes())
    body = b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body + digest)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated (needed {n} more bytes)")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 4 + 32:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    r = _Reader(body, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.u("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (want {VERSION})")
    header = json.loads(r.take(r.u("<I")).decode())
    count = r.u("<I")
    params = {}
    for _ in range(count):
        name = r.take(r.u("<H")).decode()
        ndim = r.u("<B")
        shape = tuple(r.u("<I") for _ in range(ndim))
        n_values = int(np.prod(shape)) if ndim else 1
        payload = r.take(4 * n_values)
        if name in params:
            raise CheckpointError(f"{path}: duplicate parameter {name!r}")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes")
    return Checkpoint(
        kind=header["kind"],
        config_digest=header["config_digest"],
        params=params,
        epoch=header["epoch"],
        metric=header["metric"],
        extra=header.get("extra") or {},
    )


def load_into(target, path: str, expected_kind: str, expected_digest: Optional[str] = None) -> Checkpoint:
    """Load a checkpoint into a built model or controller, enforcing kind,
    optional config digest, and an exact parameter-name match."""
    ck = load_checkpoint(path)
    if ck.kind != expected_kind:
        raise CheckpointError(
            f"{path}: holds a {ck.kind!r} checkpoint, expected {expected_kind!r}"
        )
    if expected_digest is not None and ck.config_digest != expected_digest:
        raise CheckpointError(
            f"{path}: config digest {ck.config_digest} does not match {expected_digest}"
        )
    try:
        target.load_state_dict(ck.params)
    except KeyError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return ck
