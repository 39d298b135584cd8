"""Tensor container files: magic, u64 header length, JSON header, raw LE payload.

The header records the format version, free-form metadata, and for each tensor its
name, shape, dtype ("<f8" or "<f4") and byte offset/length into the payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"LDCKPT\x00\x01"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(RuntimeError):
    pass


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(tensors: dict[str, np.ndarray], metadata: dict | None = None,
                      dtype: str = "float64") -> bytes:
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported storage dtype {dtype!r}")
    code = _DTYPES[dtype]
    entries, chunks, offset = [], [], 0
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype=code)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "metadata": metadata or {},
                         "tensors": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint container (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    header = json.loads(blob[pos:pos + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    base = pos + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated payload for {e['name']}")
        tensors[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float64)
    return tensors, header["metadata"]


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict | None = None,
                    dtype: str = "float64") -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors, metadata, dtype))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
