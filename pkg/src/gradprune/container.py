"""Bit-exact tensor container I/O.

The on-disk layout is the safetensors format: an 8-byte little-endian
unsigned header length, a UTF-8 JSON header mapping tensor name to
{"dtype", "shape", "data_offsets"}, then one contiguous byte buffer.
``data_offsets`` must be ascending and gap-free so a container written
from the same records is always byte-identical.

Only F32, F64 and U8 tensors are supported; masks are stored as U8.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

HEADER_LEN_BYTES = 8
METADATA_KEY = "__metadata__"

_DTYPE_TO_NUMPY = {
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
    "U8": np.dtype("u1"),
}
_NUMPY_TO_DTYPE = {np.dtype(k): v for v, k in (("F32", "<f4"), ("F64", "<f8"), ("U8", "u1"))}


class ContainerFormatError(ValueError):
    """Raised when a container file violates the format.

    ``offset`` is the byte offset of the first violation when it can be
    located, else None.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not name:
        raise ContainerFormatError("tensor name must be a nonempty string")
    if name == METADATA_KEY:
        raise ContainerFormatError(f"tensor name {METADATA_KEY!r} is reserved")
    if any(ord(c) < 0x20 or ord(c) == 0x7F for c in name):
        raise ContainerFormatError(f"tensor name {name!r} contains control characters")


@dataclass
class TensorRecord:
    """One named dense tensor: row-major, little-endian buffer."""

    name: str
    data: np.ndarray

    def __post_init__(self):
        _check_name(self.name)
        arr = np.ascontiguousarray(self.data)
        if arr.dtype not in _NUMPY_TO_DTYPE:
            # normalize the common aliases (float64 default, bools as masks)
            if arr.dtype == np.bool_:
                arr = arr.astype(np.uint8)
            else:
                raise ContainerFormatError(
                    f"unsupported dtype {arr.dtype} for tensor {self.name!r}; "
                    "supported: float32, float64, uint8"
                )
        self.data = arr

    @property
    def dtype(self) -> str:
        return _NUMPY_TO_DTYPE[self.data.dtype]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def nbytes(self) -> int:
        return self.data.dtype.itemsize * int(np.prod(self.shape, dtype=np.int64))


@dataclass
class Container:
    """Ordered collection of TensorRecords plus optional string metadata.

    Immutable after load by convention; iteration order equals on-disk
    header order.
    """

    records: dict[str, TensorRecord] = field(default_factory=dict)
    metadata: dict[str, str] | None = None

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self.records:
            raise ContainerFormatError(f"duplicate tensor name {name!r}")
        self.records[name] = TensorRecord(name, array)

    def __contains__(self, name: str) -> bool:
        return name in self.records

    def __getitem__(self, name: str) -> np.ndarray:
        return self.records[name].data

    def names(self) -> list[str]:
        return list(self.records)

    def __len__(self) -> int:
        return len(self.records)


def write_container(container: Container, path) -> None:
    """Write a container; the result parses back bit-exactly."""
    header: dict = {}
    if container.metadata is not None:
        for k, v in container.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ContainerFormatError("metadata must map strings to strings")
        header[METADATA_KEY] = dict(container.metadata)

    offset = 0
    payloads = []
    for name, rec in container.records.items():
        _check_name(name)
        if name != rec.name:
            raise ContainerFormatError(f"record key {name!r} does not match record name {rec.name!r}")
        raw = rec.data.tobytes()
        if len(raw) != rec.nbytes:
            raise ContainerFormatError(f"tensor {name!r}: buffer length does not match shape")
        header[name] = {
            "dtype": rec.dtype,
            "shape": list(rec.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        payloads.append(raw)
        offset += len(raw)

    header_bytes = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in payloads:
            f.write(raw)


def _header_offset_of(header_bytes: bytes, name: str) -> int | None:
    """Best-effort byte offset of a record's entry inside the file."""
    needle = json.dumps(name, ensure_ascii=False).encode("utf-8")
    pos = header_bytes.find(needle)
    return HEADER_LEN_BYTES + pos if pos >= 0 else None


def read_container(path) -> Container:
    """Parse a container file, validating every structural invariant.

    Any malformed header, truncated section, duplicate name, unsupported
    dtype, or inconsistent offset raises ContainerFormatError; corrupt
    input never crashes or silently misreads.
    """
    with open(path, "rb") as f:
        blob = f.read()

    if len(blob) < HEADER_LEN_BYTES:
        raise ContainerFormatError("file shorter than the 8-byte header length prefix", offset=0)
    (header_len,) = struct.unpack("<Q", blob[:HEADER_LEN_BYTES])
    if header_len > len(blob) - HEADER_LEN_BYTES:
        raise ContainerFormatError(
            f"declared header length {header_len} exceeds file size {len(blob)}", offset=0
        )
    header_bytes = blob[HEADER_LEN_BYTES : HEADER_LEN_BYTES + header_len]
    buffer = blob[HEADER_LEN_BYTES + header_len :]

    def _reject_duplicates(pairs):
        seen = {}
        for key, value in pairs:
            if key in seen:
                raise ContainerFormatError(
                    f"duplicate name {key!r} in header", offset=_header_offset_of(header_bytes, key)
                )
            seen[key] = value
        return seen

    try:
        header = json.loads(header_bytes.decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except UnicodeDecodeError as e:
        raise ContainerFormatError(f"header is not UTF-8: {e}", offset=HEADER_LEN_BYTES + e.start) from e
    except json.JSONDecodeError as e:
        raise ContainerFormatError(f"header is not valid JSON: {e.msg}", offset=HEADER_LEN_BYTES + e.pos) from e
    if not isinstance(header, dict):
        raise ContainerFormatError("header JSON must be an object", offset=HEADER_LEN_BYTES)

    metadata = None
    if METADATA_KEY in header:
        metadata = header.pop(METADATA_KEY)
        if not isinstance(metadata, dict) or any(
            not isinstance(k, str) or not isinstance(v, str) for k, v in metadata.items()
        ):
            raise ContainerFormatError(
                f"{METADATA_KEY} must map strings to strings",
                offset=_header_offset_of(header_bytes, METADATA_KEY),
            )

    container = Container(metadata=metadata)
    expected_offset = 0
    for name, entry in header.items():
        at = _header_offset_of(header_bytes, name)
        try:
            _check_name(name)
        except ContainerFormatError as e:
            raise ContainerFormatError(str(e), offset=at) from None
        if not isinstance(entry, dict):
            raise ContainerFormatError(f"entry for {name!r} must be an object", offset=at)
        missing = {"dtype", "shape", "data_offsets"} - set(entry)
        if missing:
            raise ContainerFormatError(f"entry for {name!r} missing {sorted(missing)}", offset=at)

        dtype_str = entry["dtype"]
        if dtype_str not in _DTYPE_TO_NUMPY:
            raise ContainerFormatError(f"unsupported dtype {dtype_str!r} for {name!r}", offset=at)
        np_dtype = _DTYPE_TO_NUMPY[dtype_str]

        shape = entry["shape"]
        if not isinstance(shape, list) or any(not isinstance(d, int) or d < 0 for d in shape):
            raise ContainerFormatError(f"shape for {name!r} must be nonnegative integers", offset=at)

        offsets = entry["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or any(not isinstance(o, int) or o < 0 for o in offsets)
        ):
            raise ContainerFormatError(f"data_offsets for {name!r} must be two nonnegative integers", offset=at)
        start, end = offsets
        if start != expected_offset:
            raise ContainerFormatError(
                f"data_offsets for {name!r} start at {start}, expected {expected_offset} "
                "(offsets must be ascending and gap-free)",
                offset=at,
            )
        if end < start:
            raise ContainerFormatError(f"data_offsets for {name!r} end before they start", offset=at)
        if end > len(buffer):
            raise ContainerFormatError(
                f"data section truncated: {name!r} ends at {end} but buffer has {len(buffer)} bytes",
                offset=at,
            )
        n_elems = int(np.prod(shape, dtype=np.int64))
        if end - start != n_elems * np_dtype.itemsize:
            raise ContainerFormatError(
                f"byte length {end - start} for {name!r} does not match "
                f"shape {shape} with dtype {dtype_str}",
                offset=at,
            )

        arr = np.frombuffer(buffer[start:end], dtype=np_dtype).reshape(shape).copy()
        container.records[name] = TensorRecord(name, arr)
        expected_offset = end

    if expected_offset != len(buffer):
        raise ContainerFormatError(
            f"data section has {len(buffer) - expected_offset} trailing bytes not covered by any record"
        )
    return container
