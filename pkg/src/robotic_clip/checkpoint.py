"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"RCLIPCK1"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "offset", "nbytes"}]}
    blobs     concatenated little-endian float32 arrays, offsets relative to the blob start
    32 bytes  SHA-256 over everything above

Pretrained encoder weights converted from elsewhere can be supplied in this
same format; only ``encoder.*`` tensors are read by the weight-loading hook.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"RCLIPCK1"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def _as_f32(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.array(x, dtype=_DTYPE, order="C")  # keeps 0-d shapes


@dataclass
class Checkpoint:
    meta: dict
    index: list[dict]
    data: bytes

    def names(self) -> list[str]:
        return [t["name"] for t in self.index]

    def raw(self, name: str) -> bytes:
        t = self._entry(name)
        return self.data[t["offset"] : t["offset"] + t["nbytes"]]

    def array(self, name: str) -> np.ndarray:
        t = self._entry(name)
        return np.frombuffer(self.raw(name), dtype=_DTYPE).reshape(t["shape"]).copy()

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: self.array(n) for n in self.names() if n.startswith(prefix)}

    def _entry(self, name: str) -> dict:
        for t in self.index:
            if t["name"] == name:
                return t
        raise KeyError(name)


def save_checkpoint(path, tensors: Mapping[str, object], meta: dict) -> str:
    """Write tensors in name order; returns the hex content checksum."""
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = _as_f32(tensors[name])
        b = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + digest)
    tmp.replace(path)
    return digest.hex()


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + hlen])
    return Checkpoint(header["meta"], header["tensors"], body[start + hlen :])


def checksum(path) -> str:
    return Path(path).read_bytes()[-32:].hex()
