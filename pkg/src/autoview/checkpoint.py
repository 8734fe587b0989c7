"""Versioned binary checkpoint: magic, JSON header, raw little-endian array payloads.

Layout::

    b"AVCKPT" | u16 version | u32 header_len | header (utf-8 JSON) | payload

The header lists every array as ``{"name", "dtype", "shape", "offset", "nbytes"}``
plus free-form ``meta``. Writing the same state twice produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"AVCKPT"
VERSION = 1


class CheckpointError(IOError):
    pass


def encode(arrays: Dict[str, np.ndarray], meta: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], order="C")
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode()
    return MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not an autoview checkpoint")
    version, hlen = struct.unpack_from("<HI", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 6
    header = json.loads(blob[start:start + hlen])
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        lo = base + e["offset"]
        buf = blob[lo:lo + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(tuple(e["shape"])).copy()
    return arrays, header["meta"]


def save(path, arrays: Dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_bytes(encode(arrays, meta))
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def load(path) -> Tuple[Dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
