"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"S2SK" | version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | float32 payload
    CRC32 (zlib) of every preceding byte, u32

The config snapshot, stage tag and step counter travel as one extra rank-1
tensor, :data:`META_NAME`, whose entries are the bytes of a JSON document.
Byte values are exact in float32, so the round trip stays bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"S2SK"
VERSION = 1
META_NAME = "__meta__"


class CheckpointError(Exception):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCRCError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    stage: str = "pretrain"
    step: int = 0

    def __post_init__(self):
        self.tensors = {n: np.array(v, dtype=np.float32) for n, v in self.tensors.items()}
        if META_NAME in self.tensors:
            raise CheckpointError(f"tensor name {META_NAME!r} is reserved")

    @classmethod
    def from_store(cls, params, config: dict, stage: str, step: int) -> "Checkpoint":
        return cls(dict(params.values()), config, stage, step)

    def to_store(self, dtype=np.float32):
        from .numerics import ParamStore

        store = ParamStore(dtype)
        for n in sorted(self.tensors):
            store.add(n, self.tensors[n])
        return store

    def require(self, names) -> None:
        missing = sorted(set(names) - set(self.tensors))
        if missing:
            raise CheckpointError(f"checkpoint is missing tensors: {', '.join(missing[:5])}")


def _meta_tensor(ckpt: Checkpoint) -> np.ndarray:
    doc = json.dumps({"config": ckpt.config, "stage": ckpt.stage, "step": ckpt.step}, sort_keys=True)
    return np.frombuffer(doc.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = [(n, ckpt.tensors[n]) for n in sorted(ckpt.tensors)]
    tensors.append((META_NAME, _meta_tensor(ckpt)))
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for name, value in tensors:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if value.ndim > 0xFF:
            raise CheckpointError(f"rank too large for {name}")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", value.ndim)
        out += struct.pack(f"<{value.ndim}I", *value.shape)
        out += np.ascontiguousarray(value, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) < 4:
        raise CheckpointTruncatedError("file shorter than the magic header")
    if r.take(4) != MAGIC:
        raise CheckpointMagicError("bad magic bytes, not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise CheckpointCRCError(f"{len(data) - r.pos} unexpected trailing bytes")
    if zlib.crc32(data[:body_end]) != crc:
        raise CheckpointCRCError("CRC32 mismatch, file is corrupted")
    meta = tensors.pop(META_NAME, None)
    if meta is None:
        raise CheckpointError(f"missing {META_NAME} record")
    doc = json.loads(meta.astype(np.uint8).tobytes().decode("utf-8"))
    return Checkpoint(tensors, doc["config"], doc["stage"], int(doc["step"]))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
