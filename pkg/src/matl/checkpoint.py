"""Versioned binary checkpoint format for actor/critic parameter sets.

Layout (all integers little-endian)::

    b"MATL"                 magic
    u16                     format version
    u32 + bytes             metadata block, UTF-8 ``key=value`` lines
    u32                     tensor count
    per tensor:
        u16 + bytes         name (UTF-8)
        u8                  rank
        u32 * rank          dims
        f64 * prod(dims)    row-major payload
    u32                     CRC32 of every preceding byte
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .networks import ActorParams, CriticParams

MAGIC = b"MATL"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Wrong magic bytes or an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The payload ends before the structure it declares."""


class CheckpointChecksumError(CheckpointError):
    """The trailing CRC32 does not match the content."""


def encode_metadata(metadata: Mapping[str, object]) -> bytes:
    lines = []
    for key, value in metadata.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"metadata entry {key!r} cannot be encoded as a key=value line")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def decode_metadata(raw: bytes) -> dict[str, str]:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        out[key] = value
    return out


def dumps(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, object] | None = None) -> bytes:
    meta = encode_metadata(metadata or {})
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        arr = np.array(array, dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, limit: int):
        self.data = data
        self.limit = limit
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > self.limit:
            raise CheckpointTruncatedError(
                f"payload ends at byte {self.limit} but {self.pos + n} bytes are declared")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Parse a checkpoint payload into (tensors, metadata)."""
    if len(data) < len(MAGIC) + 2:
        raise CheckpointTruncatedError(f"only {len(data)} bytes; header incomplete")
    if data[:4] != MAGIC:
        raise CheckpointVersionError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version} is not supported (want {FORMAT_VERSION})")
    reader = _Reader(data, max(len(data) - 4, 0))
    reader.pos = 6
    (meta_len,) = reader.unpack("<I")
    try:
        metadata = decode_metadata(reader.take(meta_len))
    except UnicodeDecodeError as exc:
        raise CheckpointChecksumError("metadata block is not valid UTF-8") from exc
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointChecksumError("tensor name is not valid UTF-8") from exc
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        size = math.prod(dims)
        raw = reader.take(8 * size)
        try:
            tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
        except ValueError as exc:
            raise CheckpointChecksumError(f"tensor {name!r} declares unusable dims {dims}") from exc
    if len(data) - reader.pos != 4:
        raise CheckpointChecksumError(
            f"{len(data) - reader.pos} bytes follow the last tensor; expected a 4-byte CRC")
    (stored,) = struct.unpack("<I", data[-4:])
    actual = zlib.crc32(data[:-4])
    if stored != actual:
        raise CheckpointChecksumError(f"CRC32 mismatch: stored {stored:#010x}, computed {actual:#010x}")
    return tensors, metadata


def serialize_params(params: ActorParams | CriticParams, metadata: Mapping[str, object] | None = None) -> bytes:
    return dumps(params.state_arrays(), metadata)


def deserialize_params(data: bytes) -> ActorParams | CriticParams:
    """Rebuild whichever parameter set the payload holds."""
    tensors, _ = loads(data)
    if any(name.startswith("critic.") for name in tensors):
        return CriticParams.from_arrays(tensors)
    return ActorParams.from_arrays(tensors)


@dataclass
class Checkpoint:
    actor: ActorParams
    critic: CriticParams | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        arrays = self.actor.state_arrays()
        if self.critic is not None:
            arrays.update(self.critic.state_arrays())
        return dumps(arrays, self.metadata)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        tensors, metadata = loads(data)
        actor = ActorParams.from_arrays(tensors)
        critic = CriticParams.from_arrays(tensors) if "critic.embed.0.weight" in tensors else None
        return cls(actor, critic, metadata)


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    atomic_write(path, checkpoint.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())
