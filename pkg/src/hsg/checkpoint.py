"""Versioned binary checkpoints of named float64 tensors.

Layout (all integers little-endian)::

    8 bytes   magic  b"HSGCKPT\\n"
    u32       format version
    u32       header length, then that many bytes of UTF-8 JSON
              (config, step, rng, m, levels)
    u32       tensor count
    per tensor, in name order:
      u16     name length, then the UTF-8 name
      u32     rank, then rank x u32 dims
      f64     product(dims) values, little-endian, C order
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HSGCKPT\n"
FORMAT_VERSION = 1


class IncompatibleCheckpoint(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    step: int
    tensors: dict
    rng: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def header(self) -> dict:
        return {"config": self.config, "step": self.step, "rng": self.rng}


def save(path, ckpt: Checkpoint) -> None:
    header = json.dumps(ckpt.header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name in sorted(ckpt.tensors):
            arr = np.asarray(ckpt.tensors[name], dtype="<f8", order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise IncompatibleCheckpoint("not a checkpoint file")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"format version {version}, expected {FORMAT_VERSION}")
    pos = 16
    header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            n = int(np.prod(dims)) if rank else 1
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * n
    except (struct.error, ValueError) as exc:
        raise IncompatibleCheckpoint(f"truncated checkpoint: {exc}") from exc
    return Checkpoint(header["config"], header["step"], tensors, header.get("rng", {}), version)
