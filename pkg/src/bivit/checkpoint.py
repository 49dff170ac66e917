"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes  b"BIVITCKP"
    version      u32
    arch         u32 length + UTF-8 text block (first line "arch-v1")
    epoch        u32
    step         u64
    rng state    u32 length + UTF-8 JSON
    meta         u32 length + UTF-8 JSON (training config, optimizer hyper-params)
    tensors      named table
    optimizer    named table (moment buffers)

A named table is ``u32 count`` followed by entries of
``u16 name length, name, u8 ndim, ndim x u32 dims, float64 LE payload``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"BIVITCKP"
VERSION = 1
ARCH_HEADER = "arch-v1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arch: str
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _put_blob(buf, text: str):
    data = text.encode("utf-8")
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def _put_table(buf, table: dict[str, np.ndarray]):
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (klen,) = self.unpack("<H")
            name = self.take(klen).decode("utf-8")
            (ndim,) = self.unpack("<B")
            dims = self.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(dims)) if ndim else 1
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _put_blob(buf, ckpt.arch)
    buf.write(struct.pack("<IQ", ckpt.epoch, ckpt.step))
    _put_blob(buf, json.dumps(ckpt.rng_state, sort_keys=True))
    _put_blob(buf, json.dumps(ckpt.meta, sort_keys=True))
    _put_table(buf, ckpt.tensors)
    _put_table(buf, ckpt.optimizer)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, expect_arch: str | None = None) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    arch = r.blob()
    if not arch.startswith(ARCH_HEADER):
        raise CheckpointError(f"{path}: unknown architecture block {arch.splitlines()[:1]}")
    if expect_arch is not None and arch != expect_arch:
        raise CheckpointError(f"{path}: architecture mismatch\n  file: {arch!r}\n  want: {expect_arch!r}")
    epoch, step = r.unpack("<IQ")
    rng_state = json.loads(r.blob())
    meta = json.loads(r.blob())
    tensors = r.table()
    optimizer = r.table()
    return Checkpoint(arch, tensors, optimizer, epoch, step, rng_state, meta)
