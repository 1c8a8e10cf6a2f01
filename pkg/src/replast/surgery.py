"""Selective weight reinitialization: utility, pruning, reinitialization.

A surgery pass scores every weight with a utility, marks the lowest-utility
fraction (or everything under a threshold) for reset, and rewrites the
marked entries with one of four strategies:

* ``M``  - the layer's pre-surgery mean,
* ``MN`` - the layer mean plus Gaussian noise scaled to a tenth of the
  mean absolute value of the layer's surviving weights,
* ``NS`` - fresh draws from Normal(0, 0.2),
* ``N``  - fresh draws from Normal(0, 1).

Biases are optionally reset to zero; normalization parameters are excluded
by the default classification rules. Configurations are written compactly
as percent plus strategy, e.g. ``"10M"`` resets the lowest-magnitude 10%
of each weight tensor to the layer mean.
"""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .container import Checkpoint, ClassificationRules, ParamClass, classify_params
from .seeding import substream

__all__ = [
    "UtilityKind",
    "PruneSpec",
    "ReinitKind",
    "SurgeryConfig",
    "SurgeryReport",
    "TensorRecord",
    "SurgeryError",
    "TagError",
    "NonstandardProportionWarning",
    "parse_config_tag",
    "utility_magnitude",
    "utility_gradient",
    "select_prune_mask",
    "layer_mean",
    "noise_scale",
    "reinit_apply",
    "apply_surgery",
]

# Guards floor(n*k) against float products landing a hair under an integer.
_FLOOR_EPS = 1e-9

NOISE_SCALE_DIVISOR = 10.0
RESAMPLE_NARROW_STD = 0.2
RESAMPLE_WIDE_STD = 1.0

# Percent values the compact tags conventionally use; others parse fine
# but raise NonstandardProportionWarning.
CONVENTIONAL_PERCENTS = (5, 10, 25)


class SurgeryError(ValueError):
    """Raised when a surgery configuration or input is invalid."""


class TagError(SurgeryError):
    """Raised when a compact configuration tag cannot be parsed."""


class NonstandardProportionWarning(UserWarning):
    """Tag percent outside the conventional {5, 10, 25} set."""


class UtilityKind(Enum):
    MAGNITUDE = "magnitude"
    GRADIENT = "gradient"


class ReinitKind(Enum):
    M = "M"
    MN = "MN"
    NS = "NS"
    N = "N"


@dataclass(frozen=True)
class PruneSpec:
    """Which weights to reset: a proportion of the lowest-utility ones,
    or everything with utility under a fixed threshold."""

    kind: str
    k: float | None = None
    rounding: str = "floor"
    t: float | None = None

    def __post_init__(self):
        if self.kind == "proportional":
            if self.k is None or not (0.0 < self.k <= 1.0):
                raise SurgeryError(f"proportion k must be in (0, 1], got {self.k}")
            if self.rounding not in ("floor", "bernoulli"):
                raise SurgeryError(f"rounding must be 'floor' or 'bernoulli', got {self.rounding!r}")
        elif self.kind == "threshold":
            if self.t is None or not (self.t >= 0.0) or not math.isfinite(self.t):
                raise SurgeryError(f"threshold t must be finite and >= 0, got {self.t}")
        else:
            raise SurgeryError(f"unknown prune kind {self.kind!r}")

    @classmethod
    def proportional(cls, k: float, rounding: str = "floor") -> "PruneSpec":
        return cls(kind="proportional", k=k, rounding=rounding)

    @classmethod
    def threshold(cls, t: float) -> "PruneSpec":
        return cls(kind="threshold", t=t)

    def to_dict(self) -> dict:
        if self.kind == "proportional":
            return {"kind": "proportional", "k": self.k, "rounding": self.rounding}
        return {"kind": "threshold", "t": self.t}

    @classmethod
    def from_dict(cls, raw: dict) -> "PruneSpec":
        kind = raw.get("kind")
        if kind == "proportional":
            return cls.proportional(raw["k"], raw.get("rounding", "floor"))
        if kind == "threshold":
            return cls.threshold(raw["t"])
        raise SurgeryError(f"unknown prune kind {kind!r}")


_TAG_RE = re.compile(r"^(\d+)\s*(MN|NS|M|N)$")


def parse_config_tag(tag: str) -> tuple[float, ReinitKind]:
    """Parse a compact tag like ``"10M"`` into (k, reinit kind).

    Percent values outside the conventional set are accepted but flagged
    with NonstandardProportionWarning.
    """
    m = _TAG_RE.match(tag.strip())
    if not m:
        if re.match(r"^\d+", tag.strip()):
            raise TagError(f"unknown reinitialization function in tag {tag!r}")
        raise TagError(f"unparseable configuration tag {tag!r}")
    percent = int(m.group(1))
    if percent == 0 or percent > 100:
        raise TagError(f"tag percent must be in 1..100, got {percent}")
    if percent not in CONVENTIONAL_PERCENTS:
        warnings.warn(
            f"tag percent {percent} is outside the conventional set {CONVENTIONAL_PERCENTS}",
            NonstandardProportionWarning,
            stacklevel=2,
        )
    return percent / 100.0, ReinitKind(m.group(2))


@dataclass
class SurgeryConfig:
    """Fully specified surgery pass; identical config + checkpoint + seed
    reproduce identical output."""

    prune: PruneSpec
    reinit: ReinitKind
    utility: UtilityKind = UtilityKind.MAGNITUDE
    scope: str = "per_tensor"
    bias_reset: bool = True
    seed: int = 0
    tag: str | None = None

    def __post_init__(self):
        if self.scope not in ("per_tensor", "global"):
            raise SurgeryError(f"scope must be 'per_tensor' or 'global', got {self.scope!r}")
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2**64:
            raise SurgeryError("seed must be an unsigned 64-bit integer")

    @classmethod
    def from_tag(cls, tag: str, **kwargs) -> "SurgeryConfig":
        k, reinit = parse_config_tag(tag)
        return cls(prune=PruneSpec.proportional(k), reinit=reinit, tag=tag.strip(), **kwargs)

    @classmethod
    def from_dict(cls, raw: dict) -> "SurgeryConfig":
        raw = dict(raw)
        tag = raw.pop("tag", None)
        kwargs = {}
        for key in ("scope", "bias_reset", "seed"):
            if key in raw:
                kwargs[key] = raw.pop(key)
        if "utility" in raw:
            kwargs["utility"] = UtilityKind(raw.pop("utility"))
        if tag is not None and "prune" not in raw and "reinit" not in raw:
            cfg = cls.from_tag(tag, **kwargs)
        else:
            if "prune" not in raw or "reinit" not in raw:
                raise SurgeryError("config needs either a tag or explicit prune and reinit")
            cfg = cls(
                prune=PruneSpec.from_dict(raw.pop("prune")),
                reinit=ReinitKind(raw.pop("reinit")),
                tag=tag,
                **kwargs,
            )
        if raw:
            raise SurgeryError(f"unknown config keys: {sorted(raw)}")
        return cfg

    def to_dict(self) -> dict:
        out = {
            "utility": self.utility.value,
            "prune": self.prune.to_dict(),
            "reinit": self.reinit.value,
            "scope": self.scope,
            "bias_reset": self.bias_reset,
            "seed": self.seed,
        }
        if self.tag:
            out["tag"] = self.tag
        return out


@dataclass
class TensorRecord:
    """Per-tensor surgery outcome."""

    name: str
    param_class: str
    n_total: int
    n_reinitialized: int
    layer_mean: float | None = None
    noise_scale: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SurgeryReport:
    """What a surgery pass changed, tensor by tensor."""

    config: dict
    records: list[TensorRecord] = field(default_factory=list)

    @property
    def totals(self) -> dict:
        weights = [r for r in self.records if r.param_class == ParamClass.WEIGHT.value]
        biases = [r for r in self.records if r.param_class == ParamClass.BIAS.value]
        return {
            "n_weights_total": sum(r.n_total for r in weights),
            "n_weights_reinitialized": sum(r.n_reinitialized for r in weights),
            "n_bias_total": sum(r.n_total for r in biases),
            "n_bias_reset": sum(r.n_reinitialized for r in biases),
            "n_changed": sum(r.n_reinitialized for r in self.records),
        }

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "tensors": [r.to_dict() for r in self.records],
            "totals": self.totals,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=False)


def _require_finite(arr: np.ndarray, what: str) -> None:
    if arr.size and not np.isfinite(arr).all():
        raise SurgeryError(f"{what} contains non-finite values")


def utility_magnitude(w) -> np.ndarray:
    """Importance proxy |w|."""
    w = np.asarray(w)
    _require_finite(w, "weight input")
    return np.abs(w)


def utility_gradient(w, g) -> np.ndarray:
    """Importance proxy |w * g|.

    Gradients taken before any fine-tuning steps tend to be a weak saliency
    signal, so magnitude is the default utility; this one is opt-in.
    """
    w = np.asarray(w)
    g = np.asarray(g)
    if w.shape != g.shape:
        raise SurgeryError(f"weight/gradient shape mismatch: {w.shape} vs {g.shape}")
    _require_finite(w, "weight input")
    _require_finite(g, "gradient input")
    return np.abs(w * g)


def _proportional_count(n: int, k: float, rounding: str, rng: np.random.Generator) -> int:
    exact = n * k
    base = int(math.floor(exact + _FLOOR_EPS))
    if rounding == "bernoulli":
        frac = exact - math.floor(exact + _FLOOR_EPS)
        if frac > _FLOOR_EPS:
            base += int(rng.random() < frac)
    return min(base, n)


def select_prune_mask(
    utilities, spec: PruneSpec, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Boolean mask of entries to reinitialize.

    Proportional variants take the floor(n*k) lowest-utility entries
    (plus a Bernoulli trial on the fractional part when requested); the
    threshold variant takes everything strictly below t. Ties in utility
    break toward the lower index.
    """
    u = np.asarray(utilities, dtype=np.float64).ravel()
    if u.size == 0:
        raise SurgeryError("cannot select a prune mask over an empty utility list")
    _require_finite(u, "utilities")
    mask = np.zeros(u.size, dtype=bool)
    if spec.kind == "threshold":
        mask[u < spec.t] = True
        return mask
    if spec.rounding == "bernoulli" and rng is None:
        raise SurgeryError("bernoulli rounding needs a random generator")
    count = _proportional_count(u.size, spec.k, spec.rounding, rng)
    if count:
        order = np.argsort(u, kind="stable")  # stable = ascending-index tie break
        mask[order[:count]] = True
    return mask


def layer_mean(t) -> float:
    """Arithmetic mean of a tensor's pre-surgery entries (64-bit accumulation)."""
    arr = np.asarray(t)
    if arr.size == 0:
        raise SurgeryError("layer mean of an empty tensor is undefined")
    return float(arr.mean(dtype=np.float64))


def noise_scale(t, mask) -> float:
    """Noise scale for MN: a tenth of mean |w| over entries not being reset."""
    arr = np.asarray(t).ravel()
    m = np.asarray(mask, dtype=bool).ravel()
    if arr.shape != m.shape:
        raise SurgeryError(f"mask length {m.size} does not match tensor length {arr.size}")
    remaining = arr[~m]
    if remaining.size == 0:
        raise SurgeryError("all entries masked: no remaining weights define the noise scale")
    return float(np.abs(remaining).mean(dtype=np.float64)) / NOISE_SCALE_DIVISOR


def reinit_apply(
    t, mask, kind: ReinitKind, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Rewrite masked entries per the reinitialization kind; others are
    bit-identical to the input."""
    arr = np.asarray(t)
    m = np.asarray(mask, dtype=bool)
    if m.shape != arr.shape and m.size != arr.size:
        raise SurgeryError(f"mask length {m.size} does not match tensor length {arr.size}")
    m = m.reshape(arr.shape)
    out = arr.copy()
    n_marked = int(m.sum())
    if n_marked == 0:
        return out
    if kind is not ReinitKind.M and rng is None:
        raise SurgeryError(f"reinit kind {kind.value} needs a random generator")
    if kind is ReinitKind.M:
        out[m] = layer_mean(arr)
    elif kind is ReinitKind.MN:
        scale = noise_scale(arr, m)
        out[m] = layer_mean(arr) + rng.standard_normal(n_marked) * scale
    elif kind is ReinitKind.NS:
        out[m] = rng.normal(0.0, RESAMPLE_NARROW_STD, n_marked)
    else:
        out[m] = rng.normal(0.0, RESAMPLE_WIDE_STD, n_marked)
    return out


def _weight_utilities(
    cp: Checkpoint,
    grads: Checkpoint | None,
    config: SurgeryConfig,
    weight_names: list[str],
) -> dict[str, np.ndarray]:
    if config.utility is UtilityKind.GRADIENT:
        if grads is None:
            raise SurgeryError("gradient utility needs a gradient checkpoint")
        out = {}
        for name in weight_names:
            if name not in grads.tensors:
                raise SurgeryError(f"gradient checkpoint is missing tensor {name!r}")
            g = grads.tensors[name]
            w = cp.tensors[name]
            if g.shape != w.shape:
                raise SurgeryError(
                    f"gradient shape mismatch for {name!r}: {g.shape} vs {w.shape}"
                )
            out[name] = utility_gradient(w, g).ravel()
        return out
    return {name: utility_magnitude(cp.tensors[name]).ravel() for name in weight_names}


def _masks_per_tensor(
    utilities: dict[str, np.ndarray], config: SurgeryConfig
) -> dict[str, np.ndarray]:
    masks = {}
    for name, u in utilities.items():
        if u.size == 0:
            masks[name] = np.zeros(0, dtype=bool)
            continue
        rng = substream(config.seed, f"prune/{name}")
        masks[name] = select_prune_mask(u, config.prune, rng)
    return masks


def _masks_global(
    utilities: dict[str, np.ndarray], config: SurgeryConfig
) -> dict[str, np.ndarray]:
    # Concatenate in sorted-name order so selection is independent of
    # checkpoint iteration order; ties then break by (name, index).
    names = sorted(utilities)
    sizes = [utilities[n].size for n in names]
    if sum(sizes) == 0:
        return {n: np.zeros(0, dtype=bool) for n in names}
    flat = np.concatenate([utilities[n] for n in names])
    rng = substream(config.seed, "prune/__global__")
    mask = select_prune_mask(flat, config.prune, rng)
    out = {}
    cursor = 0
    for name, size in zip(names, sizes):
        out[name] = mask[cursor : cursor + size]
        cursor += size
    return out


def apply_surgery(
    cp: Checkpoint,
    config: SurgeryConfig,
    grads: Checkpoint | None = None,
    rules: ClassificationRules | None = None,
) -> tuple[Checkpoint, SurgeryReport]:
    """Run one surgery pass over a checkpoint.

    Weight tensors get utility -> prune mask -> reinitialization; bias
    tensors are zeroed when ``config.bias_reset`` is set; excluded tensors
    pass through untouched. Deterministic in (cp, grads, config, rules).
    """
    rules = rules or ClassificationRules()
    classes = classify_params(cp, rules)
    weight_names = [n for n, c in classes.items() if c is ParamClass.WEIGHT]

    utilities = _weight_utilities(cp, grads, config, weight_names)
    if config.scope == "global":
        masks = _masks_global(utilities, config)
    else:
        masks = _masks_per_tensor(utilities, config)

    report = SurgeryReport(config=config.to_dict())
    out = Checkpoint(metadata=dict(cp.metadata))
    for name, arr in cp.tensors.items():
        cls = classes[name]
        if cls is ParamClass.WEIGHT:
            mask = masks[name].reshape(arr.shape)
            rng = substream(config.seed, f"reinit/{name}")
            new = reinit_apply(arr, mask, config.reinit, rng)
            record = TensorRecord(
                name=name,
                param_class=cls.value,
                n_total=arr.size,
                n_reinitialized=int(mask.sum()),
                layer_mean=layer_mean(arr) if arr.size else None,
            )
            if config.reinit is ReinitKind.MN and mask.any():
                record.noise_scale = noise_scale(arr, mask)
        elif cls is ParamClass.BIAS and config.bias_reset:
            new = np.zeros_like(arr)
            record = TensorRecord(name, cls.value, arr.size, arr.size)
        else:
            new = arr.copy()
            record = TensorRecord(name, cls.value, arr.size, 0)
        out.add(name, new)
        report.records.append(record)
    return out, report


def load_config_file(path) -> tuple[SurgeryConfig, ClassificationRules]:
    """Read a JSON surgery configuration, returning config and rules."""
    with open(str(path), "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SurgeryError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise SurgeryError(f"{path}: config must be a JSON object")
    rules_raw = raw.pop("rules", None)
    rules = ClassificationRules.from_dict(rules_raw) if rules_raw else ClassificationRules()
    return SurgeryConfig.from_dict(raw), rules
