"""Convert PyTorch state dicts to and from the checkpoint container.

``export_to_container`` writes every floating-point tensor of a state
dict into a container file (16-bit floats are upcast to 32-bit, which
is lossless) and records what happened in a manifest next to it.
``import_from_container`` replays container values into a template
state dict, restoring native dtypes from the manifest, so the result
differs from the template only where the container does.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .container import BridgeError, read_container, write_container

__all__ = [
    "SOURCE_FORMAT",
    "BridgeManifest",
    "SkippedEntry",
    "default_manifest_path",
    "export_to_container",
    "import_from_container",
]

SOURCE_FORMAT = "torch_state_dict"
DTYPE_POLICY = "upcast-half-to-f32"

# torch dtypes the container can hold, and how.
_EXACT_DTYPES = {torch.float32: "F32", torch.float64: "F64"}
_UPCAST_DTYPES = {torch.float16: "F32", torch.bfloat16: "F32"}
_TORCH_DTYPES = {
    "float16": torch.float16,
    "bfloat16": torch.bfloat16,
    "float32": torch.float32,
    "float64": torch.float64,
}


def _dtype_name(dtype: torch.dtype) -> str:
    return str(dtype).removeprefix("torch.")


def default_manifest_path(container_path) -> Path:
    """Manifest lives next to the container: <container>.manifest.json."""
    p = Path(str(container_path))
    return p.with_name(p.name + ".manifest.json")


@dataclass(frozen=True)
class SkippedEntry:
    """A native entry the container cannot hold, and why."""

    name: str
    reason: str

    def to_dict(self) -> dict:
        return {"name": self.name, "reason": self.reason}


@dataclass(frozen=True)
class BridgeManifest:
    """Record of an export: what was mapped, upcast, or skipped."""

    source_format: str = SOURCE_FORMAT
    dtype_policy: str = DTYPE_POLICY
    name_map: dict[str, str] = field(default_factory=dict)
    upcast: dict[str, str] = field(default_factory=dict)
    skipped: tuple[SkippedEntry, ...] = ()

    def __post_init__(self):
        targets = list(self.name_map.values())
        if len(set(targets)) != len(targets):
            raise BridgeError("manifest name map is not injective")
        overlap = set(self.name_map) & {s.name for s in self.skipped}
        if overlap:
            raise BridgeError(f"entries both mapped and skipped: {sorted(overlap)}")
        unknown = set(self.upcast) - set(self.name_map)
        if unknown:
            raise BridgeError(f"upcast records for unmapped entries: {sorted(unknown)}")

    @property
    def n_entries(self) -> int:
        return len(self.name_map) + len(self.skipped)

    def to_dict(self) -> dict:
        return {
            "source_format": self.source_format,
            "dtype_policy": self.dtype_policy,
            "name_map": dict(self.name_map),
            "upcast": dict(self.upcast),
            "skipped": [s.to_dict() for s in self.skipped],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "BridgeManifest":
        if not isinstance(raw, dict):
            raise BridgeError("manifest must be a JSON object")
        known = {"source_format", "dtype_policy", "name_map", "upcast", "skipped"}
        unknown = set(raw) - known
        if unknown:
            raise BridgeError(f"unknown manifest keys: {sorted(unknown)}")
        skipped = tuple(
            SkippedEntry(name=s["name"], reason=s["reason"])
            for s in raw.get("skipped", [])
        )
        return cls(
            source_format=raw.get("source_format", SOURCE_FORMAT),
            dtype_policy=raw.get("dtype_policy", DTYPE_POLICY),
            name_map=dict(raw.get("name_map", {})),
            upcast=dict(raw.get("upcast", {})),
            skipped=skipped,
        )

    def save(self, path) -> None:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        Path(str(path)).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BridgeManifest":
        try:
            raw = json.loads(Path(str(path)).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise BridgeError(f"{path}: not valid JSON: {exc}") from None
        return cls.from_dict(raw)


def export_to_container(
    state_dict, out_path, manifest_path=None
) -> BridgeManifest:
    """Write a state dict's floating tensors to a container file.

    Every entry is either mapped (name kept as-is) or skipped with a
    reason; 32/64-bit floats are bit-preserved, half-precision floats
    are upcast to 32-bit and the original dtype recorded for import.
    Returns the manifest, which is also written next to the container.
    """
    if not hasattr(state_dict, "items"):
        raise BridgeError("state dict must be a mapping of name -> tensor")
    tensors: dict[str, np.ndarray] = {}
    name_map: dict[str, str] = {}
    upcast: dict[str, str] = {}
    skipped: list[SkippedEntry] = []
    for name, value in state_dict.items():
        if not isinstance(name, str):
            raise BridgeError(f"non-string state dict key: {name!r}")
        if not torch.is_tensor(value):
            skipped.append(SkippedEntry(name, f"not a tensor ({type(value).__name__})"))
            continue
        t = value.detach().cpu().contiguous()
        if t.dtype in _EXACT_DTYPES:
            tensors[name] = t.numpy()
        elif t.dtype in _UPCAST_DTYPES:
            upcast[name] = _dtype_name(t.dtype)
            tensors[name] = t.to(torch.float32).numpy()
        else:
            skipped.append(
                SkippedEntry(name, f"non-floating dtype {_dtype_name(t.dtype)}")
            )
            continue
        name_map[name] = name
    manifest = BridgeManifest(
        name_map=name_map, upcast=upcast, skipped=tuple(skipped)
    )
    write_container(
        tensors,
        out_path,
        metadata={"source_format": SOURCE_FORMAT, "exporter": "replast-bridge"},
    )
    manifest.save(manifest_path or default_manifest_path(out_path))
    return manifest


def import_from_container(
    container_path, template_state_dict, manifest_path=None
) -> dict[str, torch.Tensor]:
    """Replay container values into a copy of the template state dict.

    Mapped tensors are replaced by the container's values (cast back to
    their recorded native dtype); skipped and unmapped entries are kept
    from the template unchanged. Raises on missing tensors and shape
    mismatches, naming the offender.
    """
    manifest = BridgeManifest.load(manifest_path or default_manifest_path(container_path))
    tensors, _ = read_container(container_path)
    missing_in_template = set(manifest.name_map) - set(template_state_dict.keys())
    if missing_in_template:
        raise BridgeError(
            f"template lacks mapped tensors: {sorted(missing_in_template)}"
        )
    out: dict[str, torch.Tensor] = {}
    for name, value in template_state_dict.items():
        if name not in manifest.name_map:
            out[name] = value.detach().clone() if torch.is_tensor(value) else value
            continue
        cname = manifest.name_map[name]
        if cname not in tensors:
            raise BridgeError(
                f"container missing tensor {cname!r} (mapped from {name!r})"
            )
        arr = tensors[cname]
        if tuple(arr.shape) != tuple(value.shape):
            raise BridgeError(
                f"{name}: container shape {list(arr.shape)} != template shape "
                f"{list(value.shape)}"
            )
        t = torch.from_numpy(arr)
        if name in manifest.upcast:
            t = t.to(_TORCH_DTYPES[manifest.upcast[name]])
        out[name] = t
    return out
