"""Tiny deterministic binary container: a JSON header (metadata + field table)
followed by raw little-endian float64 buffers, in header order. Used for frame
sequences and trained weights so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"AVNS1\x00"


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    fields = []
    buffers = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        fields.append({"name": name, "shape": list(arr.shape)})
        buffers.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "fields": fields},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for buf in buffers:
            f.write(buf)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a container file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        arrays = {}
        for field in header["fields"]:
            shape = tuple(field["shape"])
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated field {field['name']!r}")
            arrays[field["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    return arrays, header["meta"]
