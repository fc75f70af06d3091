"""Flat binary container for named parameter arrays.

Layout: a UTF-8 text header (magic line, one ``meta`` JSON line, one
``tensor`` line per entry, a ``data`` terminator), then the raw array
values little-endian in header order. Round-trips are byte-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "DEPTHFILL-CKPT 1"

_DTYPES = {"float64": "<f8", "float32": "<f4"}


def save_params(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata blob."""
    lines = [MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    blobs = []
    for name, arr in params.items():
        if any(ch.isspace() for ch in name) or not name:
            raise ValueError(f"parameter name {name!r} must be non-empty without whitespace")
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
        shape = ",".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"tensor {name} {arr.dtype.name} {shape}")
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes())
    lines.append("data")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    Path(path).write_bytes(header + b"".join(blobs))


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (params, meta) written by :func:`save_params`."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\ndata\n")
    if end < 0 or not raw.startswith(MAGIC.encode("utf-8")):
        raise ValueError(f"{path}: not a depthfill checkpoint")
    header = raw[:end].decode("utf-8").split("\n")
    payload = raw[end + len(b"\ndata\n"):]
    if not header[1].startswith("meta "):
        raise ValueError(f"{path}: missing meta line")
    meta = json.loads(header[1][5:])
    params: dict[str, np.ndarray] = {}
    offset = 0
    for line in header[2:]:
        kind, name, dtype_name, shape_s = line.split(" ")
        if kind != "tensor":
            raise ValueError(f"{path}: unexpected header line {line!r}")
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split(","))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        dt = np.dtype(_DTYPES[dtype_name])
        nbytes = count * dt.itemsize
        if offset + nbytes > len(payload):
            raise ValueError(f"{path}: truncated data section at {name!r}")
        params[name] = np.frombuffer(payload[offset : offset + nbytes], dtype=dt).reshape(shape).astype(dtype_name)
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes after data section")
    return params, meta
