"""Flat binary container of named float64 arrays.

Layout::

    b"DPCKPT01"            magic, 8 bytes
    uint64 little-endian   header length in bytes
    header                 UTF-8 JSON, keys sorted
    payload                concatenated little-endian float64 arrays

The header holds ``schema_version``, ``config_digest``, ``ema`` and an
``entries`` list of ``{"name", "shape", "offset"}`` (offset counted in
values). Arbitrary JSON-serialisable metadata rides along under
``metadata``. Writing is deterministic: identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DPCKPT01"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config_digest: str = ""
    ema: bool = False
    metadata: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays whose name starts with ``prefix + '/'``, prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = []
    offset = 0
    chunks = []
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    header = {
        "schema_version": SCHEMA_VERSION,
        "config_digest": ckpt.config_digest,
        "ema": bool(ckpt.ema),
        "metadata": ckpt.metadata,
        "entries": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema {header.get('schema_version')}")
    payload = np.frombuffer(raw, dtype="<f8", offset=16 + hlen)
    arrays = {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = payload[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return Checkpoint(arrays, header["config_digest"], header["ema"], header.get("metadata", {}))
