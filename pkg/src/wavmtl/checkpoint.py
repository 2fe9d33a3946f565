"""Single-file, self-describing model checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"SREMTL01"
    version    u32
    hash       32 bytes  SHA-256 of the config blob
    config     u32 length + UTF-8 canonical JSON
    count      u32 number of tensors
    tensors    per tensor: u16 name length, UTF-8 name, u8 rank,
               rank x u32 dims, float32 values in C order
    checksum   u32 CRC-32 of every preceding byte

Values are stored at 32-bit precision, so save -> load -> save is
byte-identical. Files are written to a temporary sibling and renamed into
place, so a failed write never leaves a partial checkpoint behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SREMTL01"
VERSION = 1


class CheckpointError(Exception):
    """A checkpoint file is truncated, corrupt or not a checkpoint at all."""


@dataclass
class Checkpoint:
    config: dict
    tensors: dict = field(default_factory=dict)     # name -> float32 array

    @property
    def config_hash(self):
        return hashlib.sha256(_config_blob(self.config)).hexdigest()

    def subset(self, prefix):
        """Tensors under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}


def _config_blob(config):
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(ckpt: Checkpoint) -> bytes:
    blob = _config_blob(ckpt.config)
    parts = [MAGIC, struct.pack("<I", VERSION), hashlib.sha256(blob).digest(),
             struct.pack("<I", len(blob)), blob, struct.pack("<I", len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = np.array(value, dtype="<f4", order="C")     # keeps rank 0
        if arr.ndim > 255:
            raise ValueError(f"tensor {name} has rank {arr.ndim} > 255")
        parts += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file corrupt)")
    r = _Reader(body)
    r.take(len(MAGIC), "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    digest = r.take(32, "config hash")
    (n_blob,) = r.unpack("<I", "config length")
    blob = r.take(n_blob, "config")
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointError("config hash does not match the embedded config")
    config = json.loads(blob.decode("utf-8"))
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H", "tensor name length")
        name = r.take(n_name, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        n = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(r.take(4 * n, f"values of {name}"), dtype="<f4")
        tensors[name] = values.reshape(dims).copy()
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after the tensor table")
    return Checkpoint(config, tensors)


def save(path, ckpt: Checkpoint):
    """Atomically write ``ckpt`` to ``path``."""
    data = encode(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())


def module_tensors(prefix, module):
    """``prefix.name -> array`` for every parameter and buffer of ``module``."""
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}
