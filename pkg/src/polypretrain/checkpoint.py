"""Binary checkpoint format.

Layout::

    b"PPCKPT\\0\\0"                  8-byte magic
    <u8 little-endian>              manifest length in bytes
    manifest (UTF-8 JSON)           format_version, config, meta, tensors
    payload                         raw little-endian float64 tensors

Each tensor entry in the manifest records ``name``, ``dtype`` (always
``"f64"``), ``shape``, ``offset`` (bytes from payload start) and
``trainable``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import CorruptPayload, VersionMismatch
from .numerics import ParamStore

MAGIC = b"PPCKPT\0\0"
FORMAT_VERSION = 1


def save_checkpoint(
    params: ParamStore,
    path: str | Path,
    config: Mapping[str, Any] | None = None,
    meta: Mapping[str, Any] | None = None,
) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in params.items():
        # asarray keeps 0-d shapes, unlike ascontiguousarray
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f8")
        raw = arr.tobytes(order="C")
        entries.append(
            {"name": name, "dtype": "f64", "shape": list(arr.shape), "offset": offset, "trainable": params.trainable(name)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": dict(config or {}),
        "meta": dict(meta or {}),
        "tensors": entries,
        "payload_bytes": offset,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def read_manifest(path: str | Path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CorruptPayload(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise CorruptPayload(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptPayload(f"{path}: unreadable manifest ({e})") from None
    return manifest, data[16 + n :]


def load_checkpoint(
    path: str | Path, expected_config: Mapping[str, Any] | None = None
) -> tuple[ParamStore, dict]:
    """Load a checkpoint; returns the parameters and the manifest.

    ``expected_config`` entries must match the stored config snapshot
    (architecture checks), otherwise :class:`VersionMismatch` is raised.
    """
    manifest, payload = read_manifest(path)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint format {version}, expected {FORMAT_VERSION}")
    stored = manifest.get("config", {})
    for key, want in (expected_config or {}).items():
        if stored.get(key) != want:
            raise VersionMismatch(f"{path}: config {key}={stored.get(key)!r} does not match requested {want!r}")
    if len(payload) != manifest.get("payload_bytes"):
        raise CorruptPayload(f"{path}: payload is {len(payload)} bytes, manifest says {manifest.get('payload_bytes')}")
    store = ParamStore()
    for e in manifest["tensors"]:
        if e.get("dtype") != "f64":
            raise CorruptPayload(f"{path}: unsupported dtype {e.get('dtype')!r} for {e['name']}")
        shape = tuple(e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 8 * count
        if start < 0 or stop > len(payload):
            raise CorruptPayload(f"{path}: tensor {e['name']} lies outside the payload")
        arr = np.frombuffer(payload[start:stop], dtype="<f8").reshape(shape)
        store.add(e["name"], torch.from_numpy(arr.copy()), trainable=e.get("trainable", True))
    return store, manifest
