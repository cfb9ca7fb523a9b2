"""Binary checkpoint format: parameters, freeze mask, and training metadata.

Layout: magic "QIEM", format version (u32 LE), parameter count (u32 LE), then
per parameter in lexicographic path order: path length (u32) + UTF-8 path,
rank (u32), dims (u32 each), raw float32 LE payload. After the parameters
comes the freeze mask, one byte per parameter in the same order. An optional
metadata tail (u32 JSON length + UTF-8 JSON) carries stage/epoch/seed/hash
bookkeeping; readers that stop after the freeze mask remain compatible.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, FormatError
from .params import FreezeMask, ParamStore
from .tensor import Tensor

CHECKPOINT_MAGIC = b"QIEM"
CHECKPOINT_VERSION = 1


def config_hash(payload: dict) -> str:
    """Stable short hash of a JSON-serializable configuration mapping."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


@dataclass
class Checkpoint:
    params: ParamStore
    frozen: dict[str, bool] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for path in self.params.paths():
            self.frozen.setdefault(path, False)
        extra = set(self.frozen) - set(self.params.paths())
        if extra:
            raise CheckpointError(f"freeze flags for unknown parameters: {sorted(extra)}")

    @classmethod
    def from_store(cls, params: ParamStore, freeze: FreezeMask | None = None,
                   metadata: dict | None = None) -> "Checkpoint":
        frozen = {}
        if freeze is not None:
            frozen = {p: freeze.frozen(p) for p in params.paths()}
        return cls(params=params.copy(), frozen=frozen, metadata=dict(metadata or {}))

    def freeze_mask(self) -> FreezeMask:
        return FreezeMask(self.params, [p for p, f in self.frozen.items() if f])

    def require_prefix(self, prefix: str) -> None:
        if not self.params.has_prefix(prefix):
            raise CheckpointError(
                f"checkpoint lacks parameters under {prefix!r}; "
                f"has {len(self.params)} parameters")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Atomic write: serialize to a temp file, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    paths = ckpt.params.paths()
    blob += struct.pack("<I", len(paths))
    for p in paths:
        raw = p.encode("utf-8")
        blob += struct.pack("<I", len(raw))
        blob += raw
        data = ckpt.params[p].data
        blob += struct.pack("<I", data.ndim)
        for dim in data.shape:
            blob += struct.pack("<I", dim)
        blob += data.astype("<f4").tobytes()
    blob += bytes(1 if ckpt.frozen[p] else 0 for p in paths)
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(meta))
    blob += meta
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    data = path.read_bytes()
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise FormatError(
                f"{path.name}: truncated at offset {offset} (needed {n} bytes)")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    magic = take(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path.name}: bad magic {magic!r} at offset 0")
    version = u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path.name}: unsupported version {version} at offset 4")
    count = u32()
    store = ParamStore()
    order = []
    for _ in range(count):
        name = take(u32()).decode("utf-8")
        rank = u32()
        shape = tuple(u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)
        store.add(name, Tensor(values, requires_grad=True))
        order.append(name)
    if order != sorted(order):
        raise FormatError(f"{path.name}: parameter paths not in lexicographic order")
    mask_bytes = take(count)
    frozen = {p: bool(b) for p, b in zip(order, mask_bytes)}
    metadata: dict = {}
    if offset < len(data):
        metadata = json.loads(take(u32()).decode("utf-8"))
        if offset != len(data):
            raise FormatError(
                f"{path.name}: {len(data) - offset} trailing bytes at offset {offset}")
    return Checkpoint(params=store, frozen=frozen, metadata=metadata)
