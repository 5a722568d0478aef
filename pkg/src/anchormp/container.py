"""Self-describing binary container for checkpoints and memory dumps.

Layout (all integers little-endian):

    magic   4 bytes  b"AMPC"
    version u32
    hlen    u64      length of the UTF-8 JSON header
    header  hlen bytes   {"kind": ..., "meta": {...}, "tensors": [...]}
    payload              concatenated float64 little-endian blobs
    digest  32 bytes     SHA-256 of everything before it

Each header tensor entry records name, shape and byte offset into the
payload, so a reader needs nothing beyond this file to reconstruct the
arrays. The trailing digest makes truncation and bit-rot detectable.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"AMPC"
VERSION = 1


def write_container(path: str | Path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write arrays plus metadata to `path` atomically (tmp file + rename)."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"kind": kind, "meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + digest)
    tmp.replace(path)


def read_container(path: str | Path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a container; returns (meta, name -> float64 array)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 12 + 32 or raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a container file (bad magic or too short)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (file truncated or corrupt)")
    version, hlen = struct.unpack("<IQ", body[4:16])
    if version != VERSION:
        raise IntegrityError(f"{path}: container version {version}, expected {VERSION}")
    try:
        header = json.loads(body[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable header: {exc}") from exc
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise IntegrityError(f"{path}: kind {header.get('kind')!r}, expected {expect_kind!r}")
    payload = body[16 + hlen:]
    tensors = {}
    for ent in header["tensors"]:
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = ent["offset"]
        end = start + 8 * count
        if end > len(payload):
            raise IntegrityError(f"{path}: tensor {ent['name']!r} extends past payload")
        arr = np.frombuffer(payload[start:end], dtype="<f8").reshape(ent["shape"])
        tensors[ent["name"]] = arr.astype(np.float64)
    return header["meta"], tensors
