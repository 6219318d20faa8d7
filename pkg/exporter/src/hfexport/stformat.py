"""Minimal writer for the pruning engine's container format.

The file contract: 8-byte little-endian header length, compact UTF-8 JSON
header mapping name -> {dtype, shape, data_offsets} (plus an optional
"__metadata__" string map), then one contiguous buffer. Offsets are
ascending and gap-free; supported dtypes are F32, F64, and U8.

Kept dependency-free on purpose: the format is the only coupling between
this exporter and the engine that consumes its output.
"""

from __future__ import annotations

import json
import struct

import numpy as np

_DTYPES = {
    np.dtype("<f4"): "F32",
    np.dtype("<f8"): "F64",
    np.dtype("u1"): "U8",
}


def write_tensors(records: dict[str, np.ndarray], path, metadata: dict[str, str] | None = None) -> None:
    header: dict = {}
    if metadata:
        header["__metadata__"] = dict(metadata)
    payloads = []
    offset = 0
    for name, array in records.items():
        arr = np.ascontiguousarray(array)
        if arr.dtype not in _DTYPES:
            raise ValueError(f"record {name!r} has unsupported dtype {arr.dtype}; use float32/float64/uint8")
        raw = arr.tobytes()
        header[name] = {
            "dtype": _DTYPES[arr.dtype],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        payloads.append(raw)
        offset += len(raw)
    blob = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)
