"""Named-tensor container.

Layout: magic ``MOSCKPT1``, a 4-byte little-endian manifest length, the UTF-8
JSON manifest, then every tensor as packed little-endian float32 in manifest
order. The manifest lists ``name``, ``shape`` and byte ``offset`` (relative to
the payload start) per tensor plus free-form ``meta``.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"MOSCKPT1"
_LE_F32 = np.dtype("<f4")


class CheckpointFormatError(Exception):
    pass


class CheckpointShapeError(CheckpointFormatError):
    pass


def encode_container(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr), dtype=_LE_F32)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = json.dumps({"tensors": entries, "payload_bytes": offset, "meta": meta or {}},
                          sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(chunks)


def decode_container(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    if len(blob) < 12:
        raise CheckpointFormatError("truncated header")
    (mlen,) = struct.unpack("<I", blob[8:12])
    try:
        manifest = json.loads(blob[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}") from None
    payload = memoryview(blob)[12 + mlen:]
    if len(payload) != manifest.get("payload_bytes", -1):
        raise CheckpointFormatError(
            f"truncated payload: {len(payload)} bytes, manifest says {manifest.get('payload_bytes')}")
    out, expected = {}, 0
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if e["offset"] != expected or end > len(payload):
            raise CheckpointShapeError(
                f"tensor {e['name']} with shape {e['shape']} does not match the payload layout")
        expected = end
        arr = np.frombuffer(payload[e["offset"]:end], dtype=_LE_F32).reshape(e["shape"])
        out[e["name"]] = arr.astype(np.float32)
    if expected != len(payload):
        raise CheckpointShapeError("manifest shapes do not cover the payload")
    return out, manifest["meta"]


def write_container(path, tensors, meta=None) -> None:
    """Write-then-rename so a crash never leaves a partial file at ``path``."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_container(tensors, meta))
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return decode_container(fh.read())
