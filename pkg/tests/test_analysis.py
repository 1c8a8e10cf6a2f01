"""Histograms, histogram sets, and their CSV/SVG export."""

import csv

import numpy as np
import pytest

from replast.analysis import (
    AnalysisError,
    Histogram,
    HistogramSet,
    build_histogram_set,
    export_histograms,
    export_per_layer_csv,
    histogram,
)
from replast.container import Checkpoint


def manual_counts(values, edges):
    # independent oracle: half-open bins, final bin closed
    counts = [0] * (len(edges) - 1)
    for v in values:
        for i in range(len(edges) - 1):
            last = i == len(edges) - 2
            if edges[i] <= v < edges[i + 1] or (last and v == edges[i + 1]):
                counts[i] += 1
                break
    return counts


# ---------------------------------------------------------------------------
# histogram


def test_histogram_known_small_case():
    h = histogram([0.0, 0.5, 1.0, 2.5, 5.0], bins=5, value_range=(0.0, 5.0))
    np.testing.assert_array_equal(h.bin_edges, [0, 1, 2, 3, 4, 5])
    np.testing.assert_array_equal(h.counts, [2, 1, 1, 0, 1])
    assert h.underflow == 0 and h.overflow == 0
    assert h.total == 5


def test_histogram_matches_manual_binning():
    rng = np.random.default_rng(0)
    values = rng.normal(size=500)
    h = histogram(values, bins=13, value_range=(-2.0, 2.0))
    np.testing.assert_array_equal(h.counts, manual_counts(values, h.bin_edges))


def test_histogram_final_bin_is_closed():
    h = histogram([1.0, 2.0], bins=2, value_range=(0.0, 2.0))
    np.testing.assert_array_equal(h.counts, [0, 2])
    assert h.overflow == 0


def test_histogram_under_and_overflow():
    h = histogram([-1.0, 0.5, 2.0], bins=1, value_range=(0.0, 1.0))
    np.testing.assert_array_equal(h.counts, [1])
    assert h.underflow == 1 and h.overflow == 1
    assert h.total == 3  # conservation including out-of-range entries


def test_histogram_constant_input_widens_range():
    h = histogram([3.0, 3.0, 3.0], bins=4)
    assert h.bin_edges[0] == pytest.approx(2.5)
    assert h.bin_edges[-1] == pytest.approx(3.5)
    assert h.counts.sum() == 3


def test_histogram_input_validation():
    with pytest.raises(AnalysisError, match="empty"):
        histogram([], bins=4)
    with pytest.raises(AnalysisError, match="positive"):
        histogram([1.0], bins=0)
    with pytest.raises(AnalysisError, match="non-finite"):
        histogram([np.nan], bins=4)
    with pytest.raises(AnalysisError, match="range"):
        histogram([1.0], bins=4, value_range=(2.0, 2.0))


def test_histogram_dataclass_validation():
    with pytest.raises(AnalysisError, match="increasing"):
        Histogram(np.array([0.0, 0.0, 1.0]), np.array([1, 1]))
    with pytest.raises(AnalysisError, match="counts length"):
        Histogram(np.array([0.0, 1.0]), np.array([1, 2]))


def test_histogram_set_enforces_invariants():
    base = histogram([0.1, 0.9], bins=2, value_range=(0.0, 1.0))
    exp = histogram([0.1, 0.1], bins=2, value_range=(0.0, 1.0))
    good = HistogramSet(
        base, exp, Histogram(base.bin_edges, np.abs(base.counts - exp.counts))
    )
    np.testing.assert_array_equal(good.diff.counts, [1, 1])
    with pytest.raises(AnalysisError, match="diff"):
        HistogramSet(base, exp, Histogram(base.bin_edges, np.array([5, 5])))
    other_edges = histogram([0.0, 2.0], bins=2)
    with pytest.raises(AnalysisError, match="edges"):
        HistogramSet(base, other_edges, base)


# ---------------------------------------------------------------------------
# checkpoint-level sets


def pair(seed, shift=0.0):
    rng = np.random.default_rng(seed)
    base = Checkpoint(
        tensors={
            "fc1.weight": rng.normal(size=(12, 6)),
            "fc1.bias": rng.normal(size=12),
            "bn1.weight": rng.normal(size=12),
        }
    )
    exp = Checkpoint(
        tensors={n: a + shift for n, a in base.tensors.items()}
    )
    return base, exp


def test_build_histogram_set_identical_checkpoints():
    base, _ = pair(1)
    hset = build_histogram_set(base, base, bins=32)
    assert not hset.diff.counts.any()
    np.testing.assert_array_equal(hset.base.counts, hset.experimental.counts)


def test_build_histogram_set_diff_invariant_random_pairs():
    rng = np.random.default_rng(2)
    for seed in range(50):
        base, exp = pair(seed, shift=float(rng.normal()))
        hset = build_histogram_set(base, exp, bins=20)
        np.testing.assert_array_equal(
            hset.diff.counts, np.abs(hset.base.counts - hset.experimental.counts)
        )
        assert np.array_equal(hset.base.bin_edges, hset.experimental.bin_edges)


def test_build_histogram_set_uses_weight_class_only():
    base, exp = pair(3, shift=100.0)
    hset = build_histogram_set(base, exp, bins=10)
    # range spans base and shifted weights but not bias or bn values
    weights = base.tensors["fc1.weight"]
    assert hset.base.bin_edges[0] == pytest.approx(weights.min())
    assert hset.base.bin_edges[-1] == pytest.approx(weights.max() + 100.0)
    assert hset.base.total == weights.size


def test_build_histogram_set_joint_range_has_no_outflow():
    base, exp = pair(4, shift=2.5)
    hset = build_histogram_set(base, exp, bins=25)
    for h in (hset.base, hset.experimental):
        assert h.underflow == 0 and h.overflow == 0


def test_build_histogram_set_name_mismatch():
    base, _ = pair(5)
    other = Checkpoint(tensors={"different.weight": np.zeros(3)})
    with pytest.raises(AnalysisError, match="differ"):
        build_histogram_set(base, other)


def test_build_histogram_set_requires_weights():
    only_bias = Checkpoint(tensors={"fc.bias": np.zeros(3)})
    with pytest.raises(AnalysisError, match="weight"):
        build_histogram_set(only_bias, only_bias)


# ---------------------------------------------------------------------------
# export


def test_export_csv_content(tmp_path):
    base, exp = pair(6, shift=0.7)
    hset = build_histogram_set(base, exp, bins=8)
    written = export_histograms(hset, tmp_path / "h", formats=("csv",))
    assert written == [str(tmp_path / "h.csv")]
    with open(written[0]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["bin_lo", "bin_hi", "base", "experimental", "diff"]
    assert len(rows) == 1 + 8
    for i, row in enumerate(rows[1:]):
        assert float(row[0]) == pytest.approx(hset.base.bin_edges[i])
        assert int(row[2]) == hset.base.counts[i]
        assert int(row[4]) == hset.diff.counts[i]


def test_export_svg_panels_deterministic(tmp_path):
    base, exp = pair(7, shift=0.3)
    hset = build_histogram_set(base, exp, bins=16)
    first = export_histograms(hset, tmp_path / "a")
    second = export_histograms(hset, tmp_path / "b")
    names_a = [p.rsplit("/", 1)[-1] for p in first]
    assert names_a == ["a.csv", "a_base.svg", "a_experimental.svg",
                       "a_diff.svg", "a_overlay.svg"]
    for pa, pb in zip(first, second):
        with open(pa, "rb") as fa, open(pb, "rb") as fb:
            assert fa.read() == fb.read()


def test_export_rejects_unknown_panel_or_format(tmp_path):
    base, exp = pair(8)
    hset = build_histogram_set(base, exp, bins=4)
    with pytest.raises(AnalysisError, match="panels"):
        export_histograms(hset, tmp_path / "x", panels=("sideways",))
    with pytest.raises(AnalysisError, match="format"):
        export_histograms(hset, tmp_path / "x", formats=("pdf",))


def test_export_per_layer_csv(tmp_path):
    base, exp = pair(9, shift=0.2)
    path = tmp_path / "layers.csv"
    export_per_layer_csv(base, exp, path, bins=5)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "tensor"
    tensors = {row[0] for row in rows[1:]}
    assert tensors == {"fc1.weight"}  # weight class only
    assert len(rows) == 1 + 5
