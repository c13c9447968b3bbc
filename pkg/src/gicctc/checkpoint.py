"""Binary container shared by model checkpoints and language models.

Layout::

    b"GICCKPT1"            8-byte magic
    u64 little-endian      header length in bytes
    header                 UTF-8 JSON, sorted keys, no whitespace:
                           {"arrays": [{"dtype", "name", "shape"}...], "meta": {...}}
    payload                arrays back to back in header order, little-endian

Serialisation is canonical: the same (meta, arrays) always give the same bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GICCKPT1"
_DTYPES = {"f8": "<f8", "i8": "<i8"}


class CheckpointError(ValueError):
    pass


def to_bytes(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        entries.append({"dtype": code, "name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True,
                        separators=(",", ":"), allow_nan=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def from_bytes(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint container (bad magic)")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    pos = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if pos + n > len(raw):
            raise CheckpointError(f"payload truncated at array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(raw[pos:pos + n], dtype=dt).reshape(e["shape"]).copy()
        pos += n
    if pos != len(raw):
        raise CheckpointError("trailing bytes after payload")
    return header["meta"], arrays


def save(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(to_bytes(meta, arrays))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return from_bytes(Path(path).read_bytes())
