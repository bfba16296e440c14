"""Flat binary container of named tensors with a text manifest.

`save(path, tensors)` writes the raw little-endian bytes of every tensor,
in order, to `path` and a manifest to `path + ".manifest"`:

    # meta {"any": "json"}
    name<TAB>dtype<TAB>d0,d1,...<TAB>offset<TAB>nbytes

Loading reproduces every array bit-exactly.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPES = {"float32", "float64", "int32", "int64", "uint8", "bool"}


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest")


def save(path, tensors: dict, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if meta is not None:
        lines.append("# meta " + json.dumps(meta, sort_keys=True))
    offset = 0
    with open(path, "wb") as f:
        for name, arr in tensors.items():
            if any(c in name for c in "\t\n"):
                raise ValueError(f"tensor name {name!r} contains a tab or newline")
            a = np.ascontiguousarray(arr)
            if a.dtype.name not in _DTYPES:
                raise TypeError(f"{name}: unsupported dtype {a.dtype}")
            raw = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
            f.write(raw)
            shape = ",".join(str(d) for d in a.shape)
            lines.append(f"{name}\t{a.dtype.name}\t{shape}\t{offset}\t{len(raw)}")
            offset += len(raw)
    manifest_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load(path):
    """Return (tensors, meta)."""
    path = Path(path)
    blob = path.read_bytes()
    tensors, meta = {}, {}
    for line in manifest_path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("# meta "):
            meta = json.loads(line[len("# meta "):])
            continue
        name, dtype, shape, offset, nbytes = line.split("\t")
        if dtype not in _DTYPES:
            raise ValueError(f"{name}: unsupported dtype {dtype} in manifest")
        shape = tuple(int(d) for d in shape.split(",")) if shape else ()
        offset, nbytes = int(offset), int(nbytes)
        if offset + nbytes > len(blob):
            raise ValueError(f"{name}: manifest points past the end of {path}")
        dt = np.dtype(dtype).newbyteorder("<")
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return tensors, meta
