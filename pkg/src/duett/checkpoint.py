"""Binary checkpoints of named float tensors.

Layout::

    b"DUETTCKP"                      8-byte magic
    uint64 little-endian             header length in bytes
    header                           UTF-8 JSON, sorted keys, no whitespace
    payload                          little-endian float32, tensors in manifest order

The header holds ``schema_version``, ``config_hash``, free-form ``meta`` and
a ``manifest`` of ``{"name", "shape", "offset", "nbytes"}`` entries whose
byte ranges tile the payload exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DUETTCKP"
SCHEMA_VERSION = 1
_PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    config_hash: str = ""
    meta: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def section(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        """Tensors under ``prefix.``, with the prefix stripped."""
        p = prefix + "."
        return OrderedDict((k[len(p):], v) for k, v in self.tensors.items() if k.startswith(p))


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        buf = np.ascontiguousarray(arr, dtype=_PAYLOAD_DTYPE).tobytes()
        manifest.append({"name": name, "shape": [int(s) for s in np.shape(arr)], "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "schema_version": ckpt.schema_version,
        "config_hash": ckpt.config_hash,
        "meta": ckpt.meta,
        "manifest": manifest,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported schema version {header.get('schema_version')}")
    payload = raw[16 + hlen :]
    tensors = OrderedDict()
    expected = 0
    for entry in header["manifest"]:
        if entry["offset"] != expected:
            raise CheckpointError(f"manifest gap before {entry['name']}")
        n = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["nbytes"] != n * 4:
            raise CheckpointError(f"size mismatch for {entry['name']}")
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError("truncated payload")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype=_PAYLOAD_DTYPE).reshape(entry["shape"]).copy()
        expected += entry["nbytes"]
    if expected != len(payload):
        raise CheckpointError("payload has trailing bytes not covered by the manifest")
    return Checkpoint(tensors, header["config_hash"], header["meta"], header["schema_version"])


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def bundle(sections: dict[str, dict], config_text: str = "", meta: dict | None = None) -> Checkpoint:
    """Flatten ``{"model": state, "heads": state, ...}`` into one checkpoint."""
    tensors = OrderedDict()
    for prefix, state in sections.items():
        for k, v in state.items():
            tensors[f"{prefix}.{k}"] = v
    return Checkpoint(tensors, config_hash(config_text), meta or {})
