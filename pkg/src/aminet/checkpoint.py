"""AMINET1 checkpoint container.

Layout::

    b"AMINET1\\n"
    uint64 little-endian header length
    UTF-8 JSON header: {"format", "version", "config", "arrays", "metadata"}
    raw little-endian float64 arrays, row-major, in header order

Each ``arrays`` entry records ``name``, ``shape``, ``offset`` (relative to
the start of the data section) and ``nbytes``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelConfig, ModelParameters

MAGIC = b"AMINET1\n"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParameters
    metadata: dict = field(default_factory=dict)


def save_checkpoint(path, config: ModelConfig, params: ModelParameters, metadata: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(params.arrays):
        a = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {
            "format": "AMINET1",
            "version": VERSION,
            "config": config.to_dict(),
            "arrays": entries,
            "metadata": metadata or {},
        },
        sort_keys=True,
    ).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path} is not an AMINET1 checkpoint")
    (n,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
    data = memoryview(raw)[start + n :]
    arrays = {}
    for e in header["arrays"]:
        chunk = data[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise DataError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return Checkpoint(ModelConfig(**header["config"]), ModelParameters(arrays), header.get("metadata", {}))
