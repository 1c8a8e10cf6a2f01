"""Weight-distribution histograms for base vs experimental checkpoints.

Produces the four comparison panels: base distribution, experimental
distribution, absolute per-bin difference, and an overlay, exported as
CSV and as deterministic SVG figures (fixed 800x600 canvas per panel).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .container import Checkpoint, ClassificationRules, ParamClass, classify_params

__all__ = [
    "Histogram",
    "HistogramSet",
    "AnalysisError",
    "DEFAULT_BINS",
    "PANELS",
    "histogram",
    "build_histogram_set",
    "export_histograms",
    "export_per_layer_csv",
]

DEFAULT_BINS = 100
PANELS = ("base", "experimental", "diff", "overlay")

_PANEL_COLORS = {"base": "tab:blue", "experimental": "tab:green", "diff": "tab:red"}
_SVG_HASHSALT = "replast"
_FIGSIZE = (8.0, 6.0)  # 800x600 at 100 dpi
_DPI = 100


class AnalysisError(ValueError):
    """Raised on invalid histogram inputs."""


@dataclass(frozen=True)
class Histogram:
    """Uniform-bin histogram with explicit out-of-range counts."""

    bin_edges: np.ndarray
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        counts = np.asarray(self.counts)
        if edges.ndim != 1 or len(edges) < 2 or not np.all(np.diff(edges) > 0):
            raise AnalysisError("bin edges must be a strictly increasing 1-d sequence")
        if counts.shape != (len(edges) - 1,):
            raise AnalysisError("counts length must be number of edges minus one")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow


@dataclass(frozen=True)
class HistogramSet:
    """Base, experimental, and absolute-difference histograms on shared edges."""

    base: Histogram
    experimental: Histogram
    diff: Histogram

    def __post_init__(self):
        if not (
            np.array_equal(self.base.bin_edges, self.experimental.bin_edges)
            and np.array_equal(self.base.bin_edges, self.diff.bin_edges)
        ):
            raise AnalysisError("histogram set members must share identical bin edges")
        expected = np.abs(self.base.counts - self.experimental.counts)
        if not np.array_equal(self.diff.counts, expected):
            raise AnalysisError("diff counts must equal |base - experimental| per bin")


def histogram(values, bins: int, value_range: tuple[float, float] | None = None) -> Histogram:
    """Histogram with uniform half-open bins [lo, hi); the final bin is closed.

    The range defaults to the min/max of the values; out-of-range entries
    are tallied as underflow/overflow so counts always conserve the input
    size.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise AnalysisError("cannot histogram an empty value list")
    if bins < 1:
        raise AnalysisError(f"bins must be positive, got {bins}")
    if not np.isfinite(arr).all():
        raise AnalysisError("histogram input contains non-finite values")
    if value_range is None:
        lo, hi = float(arr.min()), float(arr.max())
        if lo == hi:
            # Degenerate constant input: widen to a unit window around it.
            lo, hi = lo - 0.5, hi + 0.5
    else:
        lo, hi = float(value_range[0]), float(value_range[1])
        if not (lo < hi):
            raise AnalysisError(f"invalid range: lo={lo} must be < hi={hi}")
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(arr, bins=edges)
    underflow = int(np.count_nonzero(arr < lo))
    overflow = int(np.count_nonzero(arr > hi))
    return Histogram(edges, counts, underflow, overflow)


def _weight_values(cp: Checkpoint, rules: ClassificationRules | None) -> dict[str, np.ndarray]:
    classes = classify_params(cp, rules)
    return {
        name: cp.tensors[name].astype(np.float64, copy=False).ravel()
        for name, c in classes.items()
        if c is ParamClass.WEIGHT
    }


def _check_matching(base: dict[str, np.ndarray], exp: dict[str, np.ndarray]) -> None:
    if set(base) != set(exp):
        only_base = sorted(set(base) - set(exp))
        only_exp = sorted(set(exp) - set(base))
        raise AnalysisError(
            f"weight tensors differ between checkpoints "
            f"(only in base: {only_base}, only in experimental: {only_exp})"
        )
    for name in base:
        if base[name].size != exp[name].size:
            raise AnalysisError(f"tensor {name!r} size differs between checkpoints")


def build_histogram_set(
    base_cp: Checkpoint,
    exp_cp: Checkpoint,
    bins: int = DEFAULT_BINS,
    rules: ClassificationRules | None = None,
) -> HistogramSet:
    """Histogram all weight-classified entries of both checkpoints on a
    shared range (joint min/max) and derive the absolute difference."""
    base_vals = _weight_values(base_cp, rules)
    exp_vals = _weight_values(exp_cp, rules)
    _check_matching(base_vals, exp_vals)
    if not base_vals or all(v.size == 0 for v in base_vals.values()):
        raise AnalysisError("checkpoints contain no weight-classified entries")
    flat_base = np.concatenate([base_vals[n] for n in sorted(base_vals)])
    flat_exp = np.concatenate([exp_vals[n] for n in sorted(exp_vals)])
    lo = min(float(flat_base.min()), float(flat_exp.min()))
    hi = max(float(flat_base.max()), float(flat_exp.max()))
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    base_hist = histogram(flat_base, bins, (lo, hi))
    exp_hist = histogram(flat_exp, bins, (lo, hi))
    diff = Histogram(
        base_hist.bin_edges,
        np.abs(base_hist.counts - exp_hist.counts),
        abs(base_hist.underflow - exp_hist.underflow),
        abs(base_hist.overflow - exp_hist.overflow),
    )
    return HistogramSet(base=base_hist, experimental=exp_hist, diff=diff)


def _write_csv(hset: HistogramSet, path) -> None:
    with open(str(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "base", "experimental", "diff"])
        edges = hset.base.bin_edges
        for i in range(hset.base.n_bins):
            writer.writerow(
                [
                    repr(float(edges[i])),
                    repr(float(edges[i + 1])),
                    int(hset.base.counts[i]),
                    int(hset.experimental.counts[i]),
                    int(hset.diff.counts[i]),
                ]
            )


def _render_panel(hset: HistogramSet, panel: str, path) -> None:
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    edges = hset.base.bin_edges
    widths = np.diff(edges)
    with plt.rc_context({"svg.hashsalt": _SVG_HASHSALT}):
        fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=_DPI)
        try:
            if panel == "overlay":
                ax.bar(edges[:-1], hset.base.counts, width=widths, align="edge",
                       color="tab:blue", alpha=0.5, label="base")
                ax.bar(edges[:-1], hset.experimental.counts, width=widths, align="edge",
                       color="tab:green", alpha=0.5, label="experimental")
                ax.legend()
                ax.set_title("weight distribution overlay")
            else:
                hist = getattr(hset, "experimental" if panel == "experimental" else panel)
                ax.bar(edges[:-1], hist.counts, width=widths, align="edge",
                       color=_PANEL_COLORS[panel])
                title = {
                    "base": "base weight distribution",
                    "experimental": "experimental weight distribution",
                    "diff": "absolute per-bin difference",
                }[panel]
                ax.set_title(title)
            ax.set_xlabel("weight value")
            ax.set_ylabel("count")
            fig.savefig(str(path), format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)


def export_histograms(
    hset: HistogramSet,
    out_prefix,
    formats=("csv", "svg"),
    panels=PANELS,
) -> list[str]:
    """Write ``<prefix>.csv`` and/or one ``<prefix>_<panel>.svg`` per panel.

    Output is deterministic: re-exporting the same set yields identical
    bytes.
    """
    out_prefix = str(out_prefix)
    for fmt in formats:
        if fmt not in ("csv", "svg"):
            raise AnalysisError(f"unknown export format {fmt!r}")
    bad = [p for p in panels if p not in PANELS]
    if bad:
        raise AnalysisError(f"unknown panels {bad}; valid: {list(PANELS)}")
    written = []
    if "csv" in formats:
        path = f"{out_prefix}.csv"
        _write_csv(hset, path)
        written.append(path)
    if "svg" in formats:
        for panel in panels:
            path = f"{out_prefix}_{panel}.svg"
            _render_panel(hset, panel, path)
            written.append(path)
    return written


def export_per_layer_csv(
    base_cp: Checkpoint,
    exp_cp: Checkpoint,
    path,
    bins: int = DEFAULT_BINS,
    rules: ClassificationRules | None = None,
) -> None:
    """Per-tensor histogram rows (tensor, bin_lo, bin_hi, base, experimental, diff),
    each tensor binned over its own joint range."""
    base_vals = _weight_values(base_cp, rules)
    exp_vals = _weight_values(exp_cp, rules)
    _check_matching(base_vals, exp_vals)
    with open(str(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tensor", "bin_lo", "bin_hi", "base", "experimental", "diff"])
        for name in sorted(base_vals):
            if base_vals[name].size == 0:
                continue
            lo = min(float(base_vals[name].min()), float(exp_vals[name].min()))
            hi = max(float(base_vals[name].max()), float(exp_vals[name].max()))
            if lo == hi:
                lo, hi = lo - 0.5, hi + 0.5
            bh = histogram(base_vals[name], bins, (lo, hi))
            eh = histogram(exp_vals[name], bins, (lo, hi))
            for i in range(bh.n_bins):
                writer.writerow(
                    [
                        name,
                        repr(float(bh.bin_edges[i])),
                        repr(float(bh.bin_edges[i + 1])),
                        int(bh.counts[i]),
                        int(eh.counts[i]),
                        int(abs(bh.counts[i] - eh.counts[i])),
                    ]
                )
