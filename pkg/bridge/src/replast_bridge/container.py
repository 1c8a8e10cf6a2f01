"""Minimal reader/writer for the checkpoint container format.

This module deliberately re-implements just enough of the container
format to interoperate with the surgery toolkit at the file level —
the bridge talks to it only through files and its CLI, never through
imports. The format: an 8-byte little-endian unsigned header length, a
JSON header mapping tensor names to ``{"dtype", "shape",
"data_offsets"}`` (plus an optional ``__metadata__`` string map), then
the raw little-endian row-major tensor bytes. Writes are canonical —
sorted names, compact JSON, data laid out in name order — so identical
content produces identical bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "BridgeError",
    "read_container",
    "write_container",
]


class BridgeError(ValueError):
    """Raised for malformed containers, manifests, or state dicts."""


_DTYPE_TO_NUMPY = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
_NUMPY_TO_DTYPE = {np.dtype("float32"): "F32", np.dtype("float64"): "F64"}
_METADATA_KEY = "__metadata__"


def write_container(
    tensors: dict[str, np.ndarray],
    path,
    metadata: dict[str, str] | None = None,
) -> None:
    """Write float32/float64 arrays as a canonical container file."""
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    cursor = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _NUMPY_TO_DTYPE:
            raise BridgeError(f"{name}: cannot store dtype {arr.dtype}")
        tag = _NUMPY_TO_DTYPE[arr.dtype]
        blob = arr.astype(_DTYPE_TO_NUMPY[tag], copy=False).tobytes()
        entries[name] = {
            "dtype": tag,
            "shape": list(arr.shape),
            "data_offsets": [cursor, cursor + len(blob)],
        }
        blobs.append(blob)
        cursor += len(blob)
    header: dict = dict(entries)
    if metadata is not None:
        header[_METADATA_KEY] = dict(metadata)
    raw = json.dumps(
        header, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")
    with open(str(path), "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read_container(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a container file, returning (tensors, metadata)."""
    data = Path(str(path)).read_bytes()
    if len(data) < 8:
        raise BridgeError(f"{path}: too short for a container header")
    (header_len,) = struct.unpack("<Q", data[:8])
    if 8 + header_len > len(data):
        raise BridgeError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8").strip())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BridgeError(f"{path}: malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise BridgeError(f"{path}: header must be a JSON object")
    metadata = header.pop(_METADATA_KEY, {})
    payload = data[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for name, meta in header.items():
        try:
            dtype = _DTYPE_TO_NUMPY[meta["dtype"]]
            shape = tuple(int(s) for s in meta["shape"])
            begin, end = meta["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise BridgeError(f"{path}: bad entry for {name!r}: {exc}") from None
        if not 0 <= begin <= end <= len(payload):
            raise BridgeError(f"{path}: {name}: offsets outside the data section")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if end - begin != expected:
            raise BridgeError(
                f"{path}: {name}: {end - begin} bytes for shape {list(shape)}"
            )
        tensors[name] = np.frombuffer(payload[begin:end], dtype=dtype).reshape(shape).copy()
    return tensors, dict(metadata)
