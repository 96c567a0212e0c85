"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MOECKPT"                 7 bytes
    version                    u32
    config hash                32 bytes (sha256 of the model.* config lines)
    metadata length            u32, then UTF-8 "key=value" lines
    repeated until EOF:
        name length u32, name UTF-8
        rank u32, dims u64 * rank
        payload f64 * prod(dims)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MOECKPT"
VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)
    config_hash: bytes = b"\0" * 32

    def to_bytes(self) -> bytes:
        if len(self.config_hash) != 32:
            raise CheckpointError("config hash must be 32 bytes")
        out = bytearray(MAGIC)
        out += _U32.pack(VERSION)
        out += self.config_hash
        for k, v in self.metadata.items():
            if "=" in k or "\n" in k or "\n" in str(v):
                raise CheckpointError(f"metadata entry {k!r} cannot be encoded")
        meta = "".join(f"{k}={v}\n" for k, v in self.metadata.items()).encode("utf-8")
        out += _U32.pack(len(meta)) + meta
        for name, arr in self.tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            out += _U32.pack(len(nb)) + nb
            out += _U32.pack(arr.ndim)
            out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
            out += np.ascontiguousarray(arr).tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes, expected_hash: bytes | None = None) -> "Checkpoint":
        if raw[:7] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        pos = 7
        (version,) = _U32.unpack_from(raw, pos)
        pos += 4
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        chash = raw[pos:pos + 32]
        pos += 32
        if expected_hash is not None and chash != expected_hash:
            raise CheckpointError("config hash mismatch: checkpoint belongs to a different model shape")
        (mlen,) = _U32.unpack_from(raw, pos)
        pos += 4
        meta = {}
        for line in raw[pos:pos + mlen].decode("utf-8").splitlines():
            k, _, v = line.partition("=")
            meta[k] = v
        pos += mlen
        tensors: dict[str, np.ndarray] = {}
        try:
            while pos < len(raw):
                (nlen,) = _U32.unpack_from(raw, pos)
                pos += 4
                name = raw[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = _U32.unpack_from(raw, pos)
                pos += 4
                dims = struct.unpack_from(f"<{rank}Q", raw, pos)
                pos += 8 * rank
                count = int(np.prod(dims)) if rank else 1
                if pos + 8 * count > len(raw):
                    raise CheckpointError(f"truncated payload for tensor {name!r}")
                arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims)
                pos += 8 * count
                tensors[name] = arr.astype(np.float64)
        except struct.error as exc:
            raise CheckpointError(f"truncated checkpoint: {exc}") from None
        return cls(tensors, meta, chash)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected_hash: bytes | None = None) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes(), expected_hash)
