"""Tensor container I/O and parameter classification.

The on-disk layout is the flat header-indexed format used by the
safetensors convention: an unsigned 64-bit little-endian header length,
a JSON header mapping tensor names to dtype/shape/offsets (plus an
optional ``__metadata__`` string map), then the concatenated raw
little-endian row-major tensor data. Saving is canonical: names are
sorted, the JSON carries no insignificant whitespace, and data is laid
out in name order, so identical checkpoints produce identical bytes.
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "DType",
    "TensorMeta",
    "Checkpoint",
    "ParamClass",
    "ClassificationRules",
    "ContainerError",
    "load_checkpoint",
    "save_checkpoint",
    "classify_params",
]


class ContainerError(ValueError):
    """Raised when a container file or checkpoint violates the format."""


class DType(Enum):
    """Supported element types, keyed by their header tag."""

    F32 = "F32"
    F64 = "F64"

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 8

    @property
    def numpy_dtype(self) -> np.dtype:
        # Explicit little-endian so files are portable.
        return np.dtype("<f4" if self is DType.F32 else "<f8")

    @classmethod
    def from_tag(cls, tag: str) -> "DType":
        try:
            return cls(tag)
        except ValueError:
            raise ContainerError(f"unknown dtype tag {tag!r}") from None

    @classmethod
    def from_numpy(cls, dtype: np.dtype) -> "DType":
        kind = np.dtype(dtype)
        if kind.kind == "f" and kind.itemsize == 4:
            return cls.F32
        if kind.kind == "f" and kind.itemsize == 8:
            return cls.F64
        raise ContainerError(f"unsupported array dtype {kind!s} (need float32 or float64)")


@dataclass(frozen=True)
class TensorMeta:
    """Header entry for one tensor."""

    name: str
    dtype: DType
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def n_elements(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.n_elements * self.dtype.itemsize

    def validate(self) -> None:
        if any((not isinstance(d, int)) or d < 0 for d in self.shape):
            raise ContainerError(f"tensor {self.name!r}: shape must be non-negative integers")
        begin, end = self.data_offsets
        if begin > end:
            raise ContainerError(f"tensor {self.name!r}: data_offsets begin > end")
        if end - begin != self.nbytes:
            raise ContainerError(
                f"tensor {self.name!r}: data_offsets span {end - begin} bytes, "
                f"shape requires {self.nbytes}"
            )


@dataclass
class Checkpoint:
    """Named tensors plus free-form string metadata.

    Treated as an immutable value once loaded; transformations copy.
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self.tensors:
            raise ContainerError(f"duplicate tensor name {name!r}")
        if not name:
            raise ContainerError("tensor name must be non-empty")
        self.tensors[name] = np.asarray(array)

    def names(self) -> list[str]:
        return list(self.tensors)

    def n_elements(self) -> int:
        return sum(t.size for t in self.tensors.values())


class ParamClass(Enum):
    WEIGHT = "weight"
    BIAS = "bias"
    EXCLUDED = "excluded"


# Normalization scale/shift parameters and their running statistics are
# left out of surgery by default; override via ClassificationRules.
DEFAULT_BIAS_PATTERNS = (r"\.bias$",)
DEFAULT_EXCLUDE_PATTERNS = (
    r"(^|\.)bn\d*\.(weight|bias)$",
    r"(^|\.)[a-z_]*norm\d*\.(weight|bias)$",
    r"running_mean$",
    r"running_var$",
    r"num_batches_tracked$",
)


@dataclass(frozen=True)
class ClassificationRules:
    """Regex rules splitting tensors into weight / bias / excluded.

    Exclusion wins over the bias rule, so normalization shift parameters
    stay excluded. If ``include_patterns`` is non-empty, tensors matching
    neither exclusion nor bias must match one of them to count as weights;
    the rest are excluded.
    """

    bias_patterns: tuple[str, ...] = DEFAULT_BIAS_PATTERNS
    exclude_patterns: tuple[str, ...] = DEFAULT_EXCLUDE_PATTERNS
    include_patterns: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, raw: dict) -> "ClassificationRules":
        known = {"bias_patterns", "exclude_patterns", "include_patterns"}
        unknown = set(raw) - known
        if unknown:
            raise ContainerError(f"unknown classification rule keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) for k, v in raw.items()}
        return cls(**kwargs)

    def compiled(self) -> tuple[list[re.Pattern], list[re.Pattern], list[re.Pattern]]:
        def compile_all(patterns: tuple[str, ...]) -> list[re.Pattern]:
            out = []
            for p in patterns:
                try:
                    out.append(re.compile(p))
                except re.error as exc:
                    raise ContainerError(f"bad classification pattern {p!r}: {exc}") from None
            return out

        return (
            compile_all(self.bias_patterns),
            compile_all(self.exclude_patterns),
            compile_all(self.include_patterns),
        )


def classify_params(cp: Checkpoint, rules: ClassificationRules | None = None) -> dict[str, ParamClass]:
    """Assign exactly one ParamClass to every tensor in the checkpoint."""
    rules = rules or ClassificationRules()
    bias_res, exclude_res, include_res = rules.compiled()
    out: dict[str, ParamClass] = {}
    for name in cp.tensors:
        if any(r.search(name) for r in exclude_res):
            out[name] = ParamClass.EXCLUDED
        elif any(r.search(name) for r in bias_res):
            out[name] = ParamClass.BIAS
        elif include_res and not any(r.search(name) for r in include_res):
            out[name] = ParamClass.EXCLUDED
        else:
            out[name] = ParamClass.WEIGHT
    return out


_HEADER_LEN = struct.Struct("<Q")
_METADATA_KEY = "__metadata__"


def _parse_header(blob: bytes, name_hint: str) -> tuple[list[TensorMeta], dict[str, str]]:
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{name_hint}: header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise ContainerError(f"{name_hint}: header must be a JSON object")

    metadata: dict[str, str] = {}
    metas: list[TensorMeta] = []
    for name, entry in header.items():
        if name == _METADATA_KEY:
            if not isinstance(entry, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in entry.items()
            ):
                raise ContainerError(f"{name_hint}: {_METADATA_KEY} must map strings to strings")
            metadata = dict(entry)
            continue
        if not isinstance(entry, dict):
            raise ContainerError(f"{name_hint}: tensor {name!r}: descriptor must be an object")
        extra = set(entry) - {"dtype", "shape", "data_offsets"}
        if extra or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise ContainerError(
                f"{name_hint}: tensor {name!r}: descriptor needs exactly "
                f"dtype/shape/data_offsets"
            )
        dtype = DType.from_tag(entry["dtype"])
        shape = entry["shape"]
        offsets = entry["data_offsets"]
        if not isinstance(shape, list):
            raise ContainerError(f"{name_hint}: tensor {name!r}: shape must be a list")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and o >= 0 for o in offsets)
        ):
            raise ContainerError(
                f"{name_hint}: tensor {name!r}: data_offsets must be [begin, end]"
            )
        meta = TensorMeta(name, dtype, tuple(shape), (offsets[0], offsets[1]))
        meta.validate()
        metas.append(meta)
    return metas, metadata


def _check_layout(metas: list[TensorMeta], data_len: int, name_hint: str) -> None:
    """Data regions must tile the data section: no gaps, overlaps, or tail."""
    for meta in metas:
        if meta.data_offsets[1] > data_len:
            raise ContainerError(
                f"{name_hint}: tensor {meta.name!r}: offset out of bounds "
                f"(end {meta.data_offsets[1]} > data section {data_len})"
            )
    cursor = 0
    for meta in sorted(metas, key=lambda m: m.data_offsets):
        begin, end = meta.data_offsets
        if begin != cursor and not (begin == end and begin <= cursor):
            kind = "overlapping" if begin < cursor else "gapped"
            raise ContainerError(
                f"{name_hint}: {kind} data offsets at tensor {meta.name!r}"
            )
        cursor = max(cursor, end)
    if cursor != data_len:
        raise ContainerError(f"{name_hint}: {data_len - cursor} trailing bytes after tensor data")


def load_checkpoint(path, allow_nonfinite: bool = False) -> Checkpoint:
    """Read a container file, validating layout and (by default) finiteness."""
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER_LEN.size:
        raise ContainerError(f"{path}: truncated header (file has {len(raw)} bytes)")
    (header_len,) = _HEADER_LEN.unpack_from(raw)
    if len(raw) < _HEADER_LEN.size + header_len:
        raise ContainerError(
            f"{path}: truncated header (declared {header_len} bytes, "
            f"{len(raw) - _HEADER_LEN.size} available)"
        )
    metas, metadata = _parse_header(raw[_HEADER_LEN.size : _HEADER_LEN.size + header_len], path)
    seen: set[str] = set()
    for meta in metas:
        if meta.name in seen:
            raise ContainerError(f"{path}: duplicate tensor name {meta.name!r}")
        seen.add(meta.name)

    data = raw[_HEADER_LEN.size + header_len :]
    _check_layout(metas, len(data), path)

    cp = Checkpoint(metadata=metadata)
    for meta in metas:
        begin, end = meta.data_offsets
        arr = np.frombuffer(data, dtype=meta.dtype.numpy_dtype, count=meta.n_elements, offset=begin)
        arr = arr.reshape(meta.shape)
        if not allow_nonfinite and meta.n_elements and not np.isfinite(arr).all():
            raise ContainerError(f"{path}: tensor {meta.name!r} contains non-finite values")
        cp.add(meta.name, arr)
    return cp


def _serialize_header(cp: Checkpoint) -> tuple[bytes, list[str]]:
    names = sorted(cp.tensors)
    header: dict = {}
    if cp.metadata:
        if not all(isinstance(k, str) and isinstance(v, str) for k, v in cp.metadata.items()):
            raise ContainerError("checkpoint metadata must map strings to strings")
        header[_METADATA_KEY] = dict(cp.metadata)
    offset = 0
    for name in names:
        arr = cp.tensors[name]
        dtype = DType.from_numpy(arr.dtype)
        nbytes = arr.size * dtype.itemsize
        header[name] = {
            "dtype": dtype.value,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + nbytes],
        }
        offset += nbytes
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return blob.encode("utf-8"), names


def save_checkpoint(cp: Checkpoint, path) -> None:
    """Write the canonical byte representation of a checkpoint."""
    for name in cp.tensors:
        if not isinstance(name, str) or not name:
            raise ContainerError("tensor names must be non-empty strings")
        if name == _METADATA_KEY:
            raise ContainerError(f"{_METADATA_KEY!r} is reserved and cannot name a tensor")
    header_blob, names = _serialize_header(cp)
    with open(str(path), "wb") as fh:
        fh.write(_HEADER_LEN.pack(len(header_blob)))
        fh.write(header_blob)
        for name in names:
            arr = cp.tensors[name]
            dtype = DType.from_numpy(arr.dtype)
            fh.write(np.ascontiguousarray(arr, dtype=dtype.numpy_dtype).tobytes())
