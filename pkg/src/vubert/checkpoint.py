"""Single-file tensor container.

Layout::

    b"VUBCKPT1"                 8-byte magic
    uint64 little-endian        byte length of the JSON header
    JSON header (utf-8)         {"metadata": {...},
                                 "tensors": [{"name", "shape", "offset"}, ...]}
    raw data                    each tensor as little-endian float64, row-major,
                                at ``offset`` bytes from the start of this section

The header is serialized with sorted keys and no whitespace so identical
inputs give identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from vubert.errors import DataError

MAGIC = b"VUBCKPT1"


def save_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"metadata": metadata or {}, "tensors": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header: {exc}") from None
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise DataError(f"{path}: tensor {entry['name']!r} runs past end of file")
        tensors[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f8").astype(np.float64).reshape(shape)
    return tensors, header["metadata"]
