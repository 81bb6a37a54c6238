"""Parameter checkpoints: JSON manifest + raw little-endian blobs.

Layout: 4-byte magic ``XNT1``, a little-endian uint32 manifest length, the
UTF-8 JSON manifest, then the concatenated value blobs.  Manifest entries
carry name, shape, dtype and byte offset (relative to the blob section).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"XNT1"
_DTYPES = {"float32": np.float32, "float64": np.float64}


def save_checkpoint(params: dict, path) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        value = params[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise ValueError(f"unsupported checkpoint dtype {dtype_name} for {name!r}")
        blob = np.ascontiguousarray(arr, dtype=np.dtype(dtype_name).newbyteorder("<")).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype_name,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"version": 1, "entries": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic {raw[:4]!r})")
    (mlen,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8 : 8 + mlen].decode("utf-8"))
    base = 8 + mlen
    out = {}
    for entry in manifest["entries"]:
        dt = np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<")
        start = base + entry["offset"]
        arr = np.frombuffer(raw[start : start + entry["nbytes"]], dtype=dt)
        out[entry["name"]] = arr.astype(entry["dtype"]).reshape(entry["shape"])
    return out


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
