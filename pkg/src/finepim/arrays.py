"""Flat binary container for named float64 arrays.

Layout::

    FINEPIM-ARRAYS 1
    meta {"json": "object on one line"}
    array <name> <d0,d1,...|-> <offset> <count>
    ...
    end
    <little-endian float64 payload>

Offsets count float64 elements from the start of the payload. Scalars use
``-`` for the shape. Names may not contain whitespace.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = "FINEPIM-ARRAYS 1"


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    lines = [MAGIC, "meta " + json.dumps(dict(meta or {}), sort_keys=True)]
    chunks = []
    offset = 0
    for name in sorted(arrays):
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"array name {name!r} must be non-empty without whitespace")
        arr = np.asarray(arrays[name], dtype="<f8")
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"array {name} {shape} {offset} {arr.size}")
        chunks.append(arr.reshape(-1).tobytes())
        offset += arr.size
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    entries = []
    meta: dict = {}
    pos = 0
    first = True
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise DataError(f"{path}: truncated header")
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise DataError(f"{path}: not an array container")
            first = False
        elif line == "end":
            break
        elif line.startswith("meta "):
            meta = json.loads(line[5:])
        elif line.startswith("array "):
            _, name, shape, offset, count = line.split(" ")
            dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
            entries.append((name, dims, int(offset), int(count)))
        else:
            raise DataError(f"{path}: bad header line {line!r}")
    payload = np.frombuffer(raw, dtype="<f8", offset=pos)
    out = {}
    for name, dims, offset, count in entries:
        if offset + count > payload.size:
            raise DataError(f"{path}: array {name} exceeds payload")
        out[name] = payload[offset:offset + count].astype(np.float64).reshape(dims)
    return out, meta
