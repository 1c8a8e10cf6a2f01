"""Run summaries and the one-sided Mann-Whitney U comparison.

Repeated fine-tuning runs are reduced to mean and sample standard
deviation, and experimental cases are compared against the base case
with a rank-based one-sided test: accuracy with alternative "greater",
epochs to convergence with alternative "less". The exact p-value is
computed by enumerating group labelings whenever that is feasible; a
tie-corrected normal approximation with continuity correction is always
reported alongside.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RunSample",
    "GroupSummary",
    "MWUResult",
    "CaseRow",
    "ComparisonReport",
    "StatsError",
    "summarize",
    "mann_whitney_u",
    "compare_cases",
    "read_runs_file",
    "write_runs_file",
    "EXACT_ENUMERATION_LIMIT",
]

# Enumerate all C(n+m, n) labelings up to this many; beyond it only the
# normal approximation is reported.
EXACT_ENUMERATION_LIMIT = 200_000


class StatsError(ValueError):
    """Raised on degenerate statistical inputs (empty or undersized groups)."""


@dataclass(frozen=True)
class RunSample:
    """One fine-tuning run: test accuracy (percent) and epochs to convergence."""

    accuracy: float
    epochs: int

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 100.0):
            raise StatsError(f"accuracy must be in [0, 100], got {self.accuracy}")
        if self.epochs < 1:
            raise StatsError(f"epochs must be >= 1, got {self.epochs}")


@dataclass(frozen=True)
class GroupSummary:
    """Mean and sample standard deviation (n-1 denominator) of one group."""

    n: int
    mean: float
    std: float | None

    def format(self, decimals: int = 3) -> str:
        if self.std is None:
            return f"{self.mean:.{decimals}f} ± n/a"
        return f"{self.mean:.{decimals}f} ± {self.std:.{decimals}f}"


def summarize(samples) -> GroupSummary:
    """Summarize a list of scalars; std is absent for a single sample."""
    values = [float(v) for v in samples]
    if not values:
        raise StatsError("cannot summarize an empty sample")
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if len(values) >= 2 else None
    return GroupSummary(n=len(values), mean=mean, std=std)


@dataclass(frozen=True)
class MWUResult:
    """One-sided Mann-Whitney U outcome for (a, b)."""

    u_statistic: float
    p_exact: float | None
    p_approx: float
    alternative: str
    method_used: str
    degenerate: bool = False

    @property
    def p_value(self) -> float:
        return self.p_exact if self.p_exact is not None else self.p_approx


def _midranks(pooled: np.ndarray) -> np.ndarray:
    """Ranks 1..N with tied values sharing their average rank."""
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(len(pooled), dtype=np.float64)
    sorted_vals = pooled[order]
    i = 0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _tie_term(pooled: np.ndarray) -> float:
    """Sum of t^3 - t over tie groups."""
    _, counts = np.unique(pooled, return_counts=True)
    return float(np.sum(counts.astype(np.float64) ** 3 - counts))


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _exact_p(ranks: np.ndarray, n: int, u_observed: float, alternative: str) -> float:
    """Tail probability of U by enumerating every way to assign group labels."""
    total = math.comb(len(ranks), n)
    offset = n * (n + 1) / 2.0
    combos = np.fromiter(
        itertools.chain.from_iterable(itertools.combinations(range(len(ranks)), n)),
        dtype=np.intp,
        count=total * n,
    ).reshape(total, n)
    u_all = ranks[combos].sum(axis=1) - offset
    # Tolerance absorbs float noise in midrank sums so ties at the observed
    # U are counted, not dropped.
    eps = 1e-9
    if alternative == "greater":
        hits = int(np.count_nonzero(u_all >= u_observed - eps))
    else:
        hits = int(np.count_nonzero(u_all <= u_observed + eps))
    return hits / total


def mann_whitney_u(a, b, alternative: str = "greater") -> MWUResult:
    """One-sided Mann-Whitney U test of the first sample against the second.

    ``alternative="greater"`` asks whether a tends to exceed b (stochastic
    dominance of a over b); ``"less"`` the reverse. U is the statistic of
    the first sample, computed from midranks.
    """
    if alternative not in ("greater", "less"):
        raise StatsError(f"alternative must be 'greater' or 'less', got {alternative!r}")
    a = np.asarray([float(v) for v in a], dtype=np.float64)
    b = np.asarray([float(v) for v in b], dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise StatsError("both samples must be non-empty")
    n, m = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u = float(ranks[:n].sum() - n * (n + 1) / 2.0)

    big_n = n + m
    tie_term = _tie_term(pooled)
    variance = n * m / 12.0 * ((big_n + 1) - tie_term / (big_n * (big_n - 1)))
    all_tied = variance <= 0.0
    degenerate = all_tied or sorted(a.tolist()) == sorted(b.tolist())

    if all_tied:
        p_approx = 1.0
    else:
        sd = math.sqrt(variance)
        mean_u = n * m / 2.0
        # 0.5 continuity correction toward the null mean.
        if alternative == "greater":
            p_approx = _normal_sf((u - mean_u - 0.5) / sd)
        else:
            p_approx = 1.0 - _normal_sf((u - mean_u + 0.5) / sd)

    p_exact = None
    method = "approx"
    if math.comb(big_n, n) <= EXACT_ENUMERATION_LIMIT:
        p_exact = _exact_p(ranks, n, u, alternative)
        method = "exact"

    return MWUResult(
        u_statistic=u,
        p_exact=p_exact,
        p_approx=min(1.0, max(0.0, p_approx)),
        alternative=alternative,
        method_used=method,
        degenerate=degenerate,
    )


@dataclass(frozen=True)
class CaseRow:
    """One line of the comparison table."""

    tag: str
    is_base: bool
    accuracy: GroupSummary
    epochs: GroupSummary
    p_accuracy: float | None = None
    p_epochs: float | None = None
    p_method: str | None = None

    def to_dict(self) -> dict:
        return {
            "case": self.tag,
            "is_base": self.is_base,
            "n": self.accuracy.n,
            "accuracy_mean": self.accuracy.mean,
            "accuracy_std": self.accuracy.std,
            "epochs_mean": self.epochs.mean,
            "epochs_std": self.epochs.std,
            "p_accuracy": self.p_accuracy,
            "p_epochs": self.p_epochs,
            "p_method": self.p_method,
        }


@dataclass
class ComparisonReport:
    """Experimental cases against the base case, best accuracy first."""

    rows: list[CaseRow] = field(default_factory=list)
    base_tag: str = "Base"

    def to_dict(self) -> dict:
        return {"base": self.base_tag, "rows": [r.to_dict() for r in self.rows]}

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_text(self) -> str:
        """Aligned table: case, accuracy ± std, epochs ± std, one-sided p-values."""
        headers = ["Case", "Accuracy ± Std", "Epochs ± Std", "p (acc >)", "p (epochs <)"]
        lines = []
        for row in self.rows:
            tag = f"{row.tag} *" if row.is_base else row.tag
            p_acc = f"{row.p_accuracy:.5f}" if row.p_accuracy is not None else "-"
            p_ep = f"{row.p_epochs:.5f}" if row.p_epochs is not None else "-"
            lines.append([tag, row.accuracy.format(), row.epochs.format(), p_acc, p_ep])
        widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h)
                  for i, h in enumerate(headers)]
        def fmt(cells):
            return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        out = [fmt(headers), fmt(["-" * w for w in widths])]
        out.extend(fmt(l) for l in lines)
        out.append("* base case")
        return "\n".join(out) + "\n"


def compare_cases(
    experiment_runs: dict[str, list[RunSample]],
    base_runs: list[RunSample],
    base_tag: str = "Base",
) -> ComparisonReport:
    """Summarize each case and test it against the base group.

    Accuracy is tested one-sided "greater" (experimental above base) and
    epochs one-sided "less" (faster convergence). Rows sort by descending
    mean accuracy, ties broken by tag.
    """
    groups = dict(experiment_runs)
    for tag, runs in list(groups.items()) + [(base_tag, base_runs)]:
        if len(runs) < 2:
            raise StatsError(f"case {tag!r} needs >= 2 runs, got {len(runs)}")

    base_acc = [r.accuracy for r in base_runs]
    base_ep = [r.epochs for r in base_runs]
    rows = [
        CaseRow(
            tag=base_tag,
            is_base=True,
            accuracy=summarize(base_acc),
            epochs=summarize(base_ep),
        )
    ]
    for tag, runs in groups.items():
        acc = [r.accuracy for r in runs]
        ep = [r.epochs for r in runs]
        res_acc = mann_whitney_u(acc, base_acc, "greater")
        res_ep = mann_whitney_u(ep, base_ep, "less")
        rows.append(
            CaseRow(
                tag=tag,
                is_base=False,
                accuracy=summarize(acc),
                epochs=summarize(ep),
                p_accuracy=res_acc.p_value,
                p_epochs=res_ep.p_value,
                p_method=res_acc.method_used,
            )
        )
    rows.sort(key=lambda r: (-r.accuracy.mean, r.tag))
    return ComparisonReport(rows=rows, base_tag=base_tag)


RUNS_HEADER = ["case", "seed", "accuracy", "epochs"]


def write_runs_file(path, rows: list[tuple[str, int, float, int]]) -> None:
    """Write per-run samples as CSV with columns (case, seed, accuracy, epochs)."""
    with open(str(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUNS_HEADER)
        for case, seed, accuracy, epochs in rows:
            writer.writerow([case, seed, repr(float(accuracy)), int(epochs)])


def read_runs_file(path) -> dict[str, list[RunSample]]:
    """Read a runs CSV into case-keyed samples, preserving file order."""
    out: dict[str, list[RunSample]] = {}
    with open(str(path), "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != RUNS_HEADER:
            raise StatsError(f"{path}: expected header {','.join(RUNS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise StatsError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            case = row[0].strip()
            try:
                sample = RunSample(accuracy=float(row[2]), epochs=int(row[3]))
            except ValueError as exc:
                raise StatsError(f"{path}:{lineno}: {exc}") from None
            out.setdefault(case, []).append(sample)
    return out
