"""Small dense-network trainer used by the transfer experiment driver.

Pure numpy float64 MLP (ReLU hidden layers, linear output, softmax
cross-entropy) with plain SGD and early stopping on validation accuracy.
Deliberately small: the experiment protocols here run on synthetic
desk-scale tasks, not real vision datasets.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import Checkpoint, ContainerError
from .seeding import derive_seed, substream
from .stats import RunSample, compare_cases, write_runs_file
from .surgery import SurgeryConfig, apply_surgery, parse_config_tag

__all__ = [
    "TrainError",
    "ProtocolError",
    "Dataset",
    "SplitDataset",
    "TrainConfig",
    "TrainResult",
    "MLP",
    "loss_and_grads",
    "accuracy",
    "train",
    "model_to_checkpoint",
    "checkpoint_to_model",
    "synth_transfer_tasks",
    "induce_saturation",
    "TaskSpec",
    "Protocol",
    "load_protocol",
    "ExperimentResult",
    "run_experiment",
    "BASE_CASE_TAG",
]

BASE_CASE_TAG = "Base"

_LAYER_NAME_RE = re.compile(r"^layers\.(\d+)\.(weight|bias)$")


class TrainError(ValueError):
    """Raised on invalid training inputs or model/checkpoint mismatches."""


class ProtocolError(ValueError):
    """Raised on malformed experiment protocol files."""


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n, d) with integer class labels (n,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise TrainError("dataset needs x of shape (n, d) and y of shape (n,)")
        if len(x) == 0:
            raise TrainError("dataset is empty")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    val: Dataset
    test: Dataset


# ---------------------------------------------------------------------------
# model


class MLP:
    """Fully connected net; weights[i] has shape (fan_out, fan_in)."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise TrainError("need equal, nonzero numbers of weight and bias arrays")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise TrainError(f"layer {i}: weight {w.shape} and bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != weights[i - 1].shape[0]:
                raise TrainError(f"layer {i}: fan-in does not match previous fan-out")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator) -> "MLP":
        """He-scaled normal init for ReLU layers, 1/sqrt(fan_in) for the head."""
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise TrainError(f"need at least input and output sizes, got {sizes}")
        weights, biases = [], []
        last = len(sizes) - 2
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            std = np.sqrt((1.0 if i == last else 2.0) / fan_in)
            weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns (logits, activations); activations[i] is the input of layer i."""
        acts = [np.asarray(x, dtype=np.float64)]
        h = acts[0]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            if i < self.n_layers - 1:
                h = np.maximum(z, 0.0)
                acts.append(h)
            else:
                return z, acts
        raise AssertionError("unreachable")

    def predict(self, x: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(x)
        return np.argmax(logits, axis=1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(
    model: MLP, x: np.ndarray, y: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean softmax cross-entropy and its gradient for every parameter,
    keyed by checkpoint tensor name."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_classes = model.weights[-1].shape[0]
    if y.min() < 0 or y.max() >= n_classes:
        raise TrainError(f"labels must lie in [0, {n_classes})")
    logits, acts = model.forward(x)
    probs = _softmax(logits)
    batch = len(y)
    loss = float(-np.log(probs[np.arange(batch), y] + 1e-300).mean())

    delta = probs.copy()
    delta[np.arange(batch), y] -= 1.0
    delta /= batch
    grads: dict[str, np.ndarray] = {}
    for i in range(model.n_layers - 1, -1, -1):
        grads[f"layers.{i}.weight"] = delta.T @ acts[i]
        grads[f"layers.{i}.bias"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (acts[i] > 0.0)
    return loss, grads


def accuracy(model: MLP, ds: Dataset) -> float:
    """Classification accuracy in percent."""
    return float((model.predict(ds.x) == ds.y).mean() * 100.0)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    batch_size: int = 32
    max_epochs: int = 300
    patience: int = 10

    def __post_init__(self):
        if not (self.lr > 0.0 and np.isfinite(self.lr)):
            raise TrainError(f"lr must be positive and finite, got {self.lr}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise TrainError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise TrainError(f"patience must be >= 1, got {self.patience}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class TrainResult:
    """Outcome of one training run; the trained model holds the weights of
    the best validation epoch, not the final epoch."""

    best_val_accuracy: float
    best_epoch: int
    stop_epoch: int
    val_history: tuple[float, ...]


def train(
    model: MLP, train_ds: Dataset, val_ds: Dataset, config: TrainConfig,
    rng: np.random.Generator,
) -> TrainResult:
    """SGD with per-epoch reshuffling and validation-accuracy early stopping.

    Stops once the count of consecutive epochs without strict improvement
    reaches the patience, then restores the best snapshot into ``model``.
    """
    if train_ds.dim != model.sizes[0] or val_ds.dim != model.sizes[0]:
        raise TrainError("dataset dimensionality does not match the model input size")
    best_acc = -np.inf
    best_epoch = 0
    best_weights = [w.copy() for w in model.weights]
    best_biases = [b.copy() for b in model.biases]
    stall = 0
    history: list[float] = []
    stop_epoch = config.max_epochs
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(train_ds.n)
        for start in range(0, train_ds.n, config.batch_size):
            idx = order[start : start + config.batch_size]
            _, grads = loss_and_grads(model, train_ds.x[idx], train_ds.y[idx])
            for i in range(model.n_layers):
                model.weights[i] -= config.lr * grads[f"layers.{i}.weight"]
                model.biases[i] -= config.lr * grads[f"layers.{i}.bias"]
        val_acc = accuracy(model, val_ds)
        history.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_weights = [w.copy() for w in model.weights]
            best_biases = [b.copy() for b in model.biases]
            stall = 0
        else:
            stall += 1
        if stall >= config.patience:
            stop_epoch = epoch
            break
    model.weights = best_weights
    model.biases = best_biases
    return TrainResult(
        best_val_accuracy=float(best_acc),
        best_epoch=best_epoch,
        stop_epoch=stop_epoch,
        val_history=tuple(history),
    )


# ---------------------------------------------------------------------------
# model <-> checkpoint


def model_to_checkpoint(model: MLP, metadata: dict[str, str] | None = None) -> Checkpoint:
    tensors = {}
    for i in range(model.n_layers):
        tensors[f"layers.{i}.weight"] = model.weights[i].copy()
        tensors[f"layers.{i}.bias"] = model.biases[i].copy()
    return Checkpoint(tensors=tensors, metadata=dict(metadata or {}))


def checkpoint_to_model(cp: Checkpoint) -> MLP:
    """Rebuild a model from ``layers.{i}.weight`` / ``layers.{i}.bias`` tensors."""
    found: dict[int, dict[str, np.ndarray]] = {}
    for name, arr in cp.tensors.items():
        m = _LAYER_NAME_RE.match(name)
        if m is None:
            raise TrainError(f"tensor {name!r} does not look like a dense-net parameter")
        found.setdefault(int(m.group(1)), {})[m.group(2)] = arr
    if not found:
        raise TrainError("checkpoint holds no layer tensors")
    n_layers = max(found) + 1
    weights, biases = [], []
    for i in range(n_layers):
        if i not in found or set(found[i]) != {"weight", "bias"}:
            raise TrainError(f"layer {i} is missing its weight or bias tensor")
        weights.append(np.asarray(found[i]["weight"], dtype=np.float64))
        biases.append(np.asarray(found[i]["bias"], dtype=np.float64))
    return MLP(weights, biases)


# ---------------------------------------------------------------------------
# synthetic transfer tasks


def _make_split(x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> SplitDataset:
    # 70/15/15 split after a full shuffle
    n = len(y)
    order = rng.permutation(n)
    x, y = x[order], y[order]
    n_train = int(n * 0.70)
    n_val = int(n * 0.15)
    return SplitDataset(
        train=Dataset(x[:n_train], y[:n_train]),
        val=Dataset(x[n_train : n_train + n_val], y[n_train : n_train + n_val]),
        test=Dataset(x[n_train + n_val :], y[n_train + n_val :]),
    )


def _sample_blobs(
    means: np.ndarray, labels: np.ndarray, n_per_class: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    n_classes, dim = means.shape
    xs, ys = [], []
    for c in range(n_classes):
        xs.append(means[c] + rng.normal(0.0, 1.0, size=(n_per_class, dim)))
        ys.append(np.full(n_per_class, labels[c], dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def synth_transfer_tasks(
    n_classes: int,
    dim: int,
    n_per_class: int,
    shift: float,
    seed: int,
) -> tuple[SplitDataset, SplitDataset]:
    """Source/target Gaussian-blob classification pair.

    The target reuses the source class means rotated by exp(shift * S) for
    a random skew-symmetric S, with labels permuted; shift 0 keeps the
    rotation and the permutation at identity, so the target then matches
    the source distribution exactly.
    """
    from scipy.linalg import expm

    if n_classes < 2 or dim < 1 or n_per_class < 1:
        raise TrainError("need n_classes >= 2, dim >= 1, n_per_class >= 1")
    if not (np.isfinite(shift) and shift >= 0.0):
        raise TrainError(f"shift must be finite and >= 0, got {shift}")
    rng = substream(seed, "task")
    means = rng.normal(0.0, 1.0, size=(n_classes, dim))
    raw = rng.normal(0.0, 1.0, size=(dim, dim))
    skew = (raw - raw.T) / 2.0
    if shift == 0.0:
        rotation = np.eye(dim)
        perm = np.arange(n_classes)
    else:
        rotation = expm(shift * skew)
        perm = rng.permutation(n_classes)
    source_x, source_y = _sample_blobs(
        means, np.arange(n_classes), n_per_class, substream(seed, "source")
    )
    target_means = means @ rotation.T
    target_x, target_y = _sample_blobs(
        target_means, perm, n_per_class, substream(seed, "target")
    )
    return (
        _make_split(source_x, source_y, substream(seed, "split/source")),
        _make_split(target_x, target_y, substream(seed, "split/target")),
    )


def induce_saturation(
    cp: Checkpoint, fraction: float, seed: int, scale: float = 1e-6
) -> Checkpoint:
    """Collapse the smallest-magnitude entries of every hidden weight matrix
    (all weight tensors except the final layer's) to near-zero noise,
    emulating a checkpoint whose small weights carry no usable signal."""
    if not (0.0 <= fraction <= 1.0):
        raise TrainError(f"fraction must lie in [0, 1], got {fraction}")
    if not (scale > 0.0):
        raise TrainError(f"scale must be positive, got {scale}")
    model = checkpoint_to_model(cp)  # validates the naming scheme
    last = model.n_layers - 1
    tensors = {}
    for name, arr in cp.tensors.items():
        m = _LAYER_NAME_RE.match(name)
        out = np.array(arr, dtype=np.float64)
        if m.group(2) == "weight" and int(m.group(1)) != last:
            flat = out.ravel()
            count = int(np.floor(fraction * flat.size))
            if count > 0:
                idx = np.argsort(np.abs(flat), kind="stable")[:count]
                rng = substream(seed, f"saturate/{name}")
                flat[idx] = rng.normal(0.0, scale, size=count)
        tensors[name] = out
    return Checkpoint(tensors=tensors, metadata=dict(cp.metadata))


# ---------------------------------------------------------------------------
# experiment protocol


@dataclass(frozen=True)
class TaskSpec:
    n_classes: int = 4
    dim: int = 16
    n_per_class: int = 500
    shift: float = 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


_PROTOCOL_KEYS = {"name", "seed", "reps", "cases", "task", "model", "train",
                  "saturate", "surgery"}
_SURGERY_KEYS = {"bias_reset", "scope", "reset_base_biases"}


@dataclass(frozen=True)
class Protocol:
    """Full description of one transfer experiment."""

    seed: int
    reps: int
    cases: tuple[str, ...]
    task: TaskSpec = field(default_factory=TaskSpec)
    hidden: tuple[int, ...] = (32, 32)
    train: TrainConfig = field(default_factory=TrainConfig)
    saturate_fraction: float = 0.3
    bias_reset: bool = True
    scope: str = "per_tensor"
    reset_base_biases: bool = False
    name: str = "experiment"

    def __post_init__(self):
        if self.reps < 2:
            raise ProtocolError(f"need at least 2 repetitions, got {self.reps}")
        if BASE_CASE_TAG not in self.cases:
            raise ProtocolError(f"cases must include {BASE_CASE_TAG!r}")
        others = [c for c in self.cases if c != BASE_CASE_TAG]
        if not others:
            raise ProtocolError("need at least one non-base case")
        if len(set(self.cases)) != len(self.cases):
            raise ProtocolError("case tags must be unique")
        for tag in others:
            parse_config_tag(tag)  # validates; may warn on unusual proportions
        if not all(h >= 1 for h in self.hidden) or not self.hidden:
            raise ProtocolError(f"hidden sizes must be positive, got {self.hidden}")
        if not (0.0 <= self.saturate_fraction <= 1.0):
            raise ProtocolError(
                f"saturate fraction must lie in [0, 1], got {self.saturate_fraction}"
            )
        if self.scope not in ("per_tensor", "global"):
            raise ProtocolError(f"scope must be per_tensor or global, got {self.scope!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "Protocol":
        if not isinstance(d, dict):
            raise ProtocolError("protocol must be a JSON object")
        unknown = set(d) - _PROTOCOL_KEYS
        if unknown:
            raise ProtocolError(f"unknown protocol keys: {sorted(unknown)}")
        for key in ("seed", "reps", "cases", "task", "model", "train", "saturate"):
            if key not in d:
                raise ProtocolError(f"protocol is missing required key {key!r}")
        try:
            task = TaskSpec(**d["task"])
            train_cfg = TrainConfig(**d["train"])
        except TypeError as exc:
            raise ProtocolError(f"bad task or train block: {exc}") from None
        model = d["model"]
        if not isinstance(model, dict) or set(model) != {"hidden"}:
            raise ProtocolError("model block must be exactly {\"hidden\": [...]}")
        sat = d["saturate"]
        if not isinstance(sat, dict) or set(sat) != {"fraction"}:
            raise ProtocolError("saturate block must be exactly {\"fraction\": ...}")
        surgery = d.get("surgery", {})
        if not isinstance(surgery, dict) or not set(surgery) <= _SURGERY_KEYS:
            raise ProtocolError(f"surgery block allows only keys {sorted(_SURGERY_KEYS)}")
        return cls(
            seed=int(d["seed"]),
            reps=int(d["reps"]),
            cases=tuple(str(c) for c in d["cases"]),
            task=task,
            hidden=tuple(int(h) for h in model["hidden"]),
            train=train_cfg,
            saturate_fraction=float(sat["fraction"]),
            bias_reset=bool(surgery.get("bias_reset", True)),
            scope=str(surgery.get("scope", "per_tensor")),
            reset_base_biases=bool(surgery.get("reset_base_biases", False)),
            name=str(d.get("name", "experiment")),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "reps": self.reps,
            "cases": list(self.cases),
            "task": self.task.to_dict(),
            "model": {"hidden": list(self.hidden)},
            "train": self.train.to_dict(),
            "saturate": {"fraction": self.saturate_fraction},
            "surgery": {
                "bias_reset": self.bias_reset,
                "scope": self.scope,
                "reset_base_biases": self.reset_base_biases,
            },
        }


def load_protocol(path) -> Protocol:
    try:
        with open(str(path), "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"cannot read protocol file {path}: {exc}") from None
    return Protocol.from_dict(data)


# ---------------------------------------------------------------------------
# experiment driver


@dataclass(frozen=True)
class ExperimentResult:
    protocol: Protocol
    runs: dict
    records: tuple[dict, ...]
    report: object
    out_files: tuple[str, ...]


def _surgery_checkpoint(
    cp: Checkpoint, tag: str, scope: str, bias_reset: bool, seed: int
) -> Checkpoint:
    config = SurgeryConfig.from_tag(tag, seed=seed, scope=scope, bias_reset=bias_reset)
    out, _ = apply_surgery(cp, config)
    return out


def run_experiment(protocol: Protocol, out_dir) -> ExperimentResult:
    """Run the full pretrain / saturate / operate / fine-tune comparison.

    Every repetition shares its pretrained starting point across all cases,
    and fine-tuning consumes an identically seeded shuffle stream per case,
    so the surgical treatment is the only difference between cases within a
    repetition.  Writes runs.csv, table.txt, results.json, and a histogram
    CSV plus SVG panels per non-base case (repetition 0, before vs after
    the operation).
    """
    from .analysis import build_histogram_set, export_histograms

    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    master = protocol.seed
    sizes = [protocol.task.dim] + list(protocol.hidden) + [protocol.task.n_classes]

    runs: dict[str, list[RunSample]] = {tag: [] for tag in protocol.cases}
    records: list[dict] = []
    rows: list[tuple[str, int, float, int]] = []
    hist_files: list[str] = []

    for rep in range(protocol.reps):
        rep_seed = derive_seed(master, f"rep{rep}")
        source, target = synth_transfer_tasks(
            protocol.task.n_classes,
            protocol.task.dim,
            protocol.task.n_per_class,
            protocol.task.shift,
            seed=derive_seed(master, f"rep{rep}/task"),
        )
        model = MLP.init(sizes, substream(master, f"rep{rep}/init"))
        train(model, source.train, source.val, protocol.train,
              substream(master, f"rep{rep}/pretrain"))
        saturated = induce_saturation(
            model_to_checkpoint(model),
            protocol.saturate_fraction,
            seed=derive_seed(master, f"rep{rep}/saturate"),
        )
        for tag in protocol.cases:
            if tag == BASE_CASE_TAG:
                start = saturated
                if protocol.reset_base_biases:
                    tensors = {
                        n: (np.zeros_like(a) if n.endswith(".bias") else a.copy())
                        for n, a in saturated.tensors.items()
                    }
                    start = Checkpoint(tensors=tensors, metadata=dict(saturated.metadata))
            else:
                start = _surgery_checkpoint(
                    saturated, tag, protocol.scope, protocol.bias_reset,
                    seed=derive_seed(master, f"rep{rep}/case/{tag}"),
                )
                if rep == 0:
                    hist = build_histogram_set(saturated, start)
                    hist_files.extend(
                        export_histograms(hist, str(out_path / f"hist_{tag}"))
                    )
            case_model = checkpoint_to_model(start)
            result = train(case_model, target.train, target.val, protocol.train,
                           substream(master, f"rep{rep}/finetune"))
            test_acc = accuracy(case_model, target.test)
            runs[tag].append(RunSample(accuracy=test_acc, epochs=result.best_epoch))
            rows.append((tag, rep_seed, test_acc, result.best_epoch))
            records.append(
                {
                    "case": tag,
                    "rep": rep,
                    "seed": rep_seed,
                    "accuracy": test_acc,
                    "best_val_accuracy": result.best_val_accuracy,
                    "epochs": result.best_epoch,
                    "stop_epoch": result.stop_epoch,
                }
            )

    base_runs = runs.pop(BASE_CASE_TAG)
    report = compare_cases(runs, base_runs, base_tag=BASE_CASE_TAG)

    runs_file = out_path / "runs.csv"
    write_runs_file(runs_file, rows)
    table_file = out_path / "table.txt"
    table_file.write_text(report.to_text() + "\n", encoding="utf-8")
    results_file = out_path / "results.json"
    payload = {
        "protocol": protocol.to_dict(),
        "runs": records,
        "comparison": report.to_dict(),
    }
    results_file.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    out_files = [str(runs_file), str(table_file), str(results_file)] + hist_files
    all_runs = dict(runs)
    all_runs[BASE_CASE_TAG] = base_runs
    return ExperimentResult(
        protocol=protocol,
        runs=all_runs,
        records=tuple(records),
        report=report,
        out_files=tuple(out_files),
    )
