"""Acceptance gate: one test per release criterion, tolerances pinned.

Each test is intentionally self-contained and named after its criterion so
the verbose run reads as a pass/fail checklist.
"""

import itertools
import math
import time
from functools import lru_cache

import numpy as np
import pytest

from replast.container import Checkpoint, load_checkpoint, save_checkpoint
from replast.seeding import substream
from replast.stats import mann_whitney_u
from replast.surgery import (
    PruneSpec,
    ReinitKind,
    SurgeryConfig,
    apply_surgery,
    noise_scale,
    reinit_apply,
    select_prune_mask,
)
from replast.tinytrain import (
    MLP,
    TrainConfig,
    induce_saturation,
    loss_and_grads,
    model_to_checkpoint,
    run_experiment,
    train,
)
from replast.analysis import build_histogram_set


# ---------------------------------------------------------------------------
# 1. Format round trip: 1,000 randomized checkpoints survive
#    save -> load -> save byte-identically in under 30 seconds.


def test_acceptance_format_round_trip_1000_checkpoints_under_30s(tmp_path):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    for i in range(1000):
        cp = Checkpoint()
        n_tensors = int(rng.integers(1, 21))
        for j in range(n_tensors):
            if i == 0 and j == 0:
                size = 100_000  # pin the upper size bound
            elif rng.random() < 0.05:
                size = 0
            else:
                size = int(10 ** rng.uniform(0.0, 5.0))
            dtype = np.float32 if rng.random() < 0.5 else np.float64
            cp.add(f"t{j}.weight", rng.random(size).astype(dtype))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(cp, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"round-trip loop took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. Pruning exactness: floor(n*k) entries per tensor (floor(N*k) globally),
#    changed magnitudes never above unchanged ones, exhaustively vs a
#    sort-based oracle for n <= 64.


def test_acceptance_pruning_exactness_floor_counts_and_ordering():
    rng = np.random.default_rng(7)
    for k in (0.05, 0.10, 0.25):
        spec = PruneSpec.proportional(k)
        for n in range(1, 65):
            u = rng.normal(size=n)
            mask = select_prune_mask(u, spec)
            expected = math.floor(n * k + 1e-9)
            assert mask.sum() == expected
            oracle = sorted(range(n), key=lambda i: (u[i], i))[:expected]
            assert set(np.flatnonzero(mask)) == set(oracle)

        # full surgery pass, per-tensor scope
        cp = Checkpoint()
        sizes = {"a.weight": 97, "b.weight": 256, "c.weight": 41}
        for name, n in sizes.items():
            cp.add(name, rng.normal(size=n))
        cfg = SurgeryConfig(prune=spec, reinit=ReinitKind.NS, seed=5, bias_reset=False)
        out, _ = apply_surgery(cp, cfg)
        for name, n in sizes.items():
            w = cp.tensors[name]
            changed = out.tensors[name] != w
            assert changed.sum() == math.floor(n * k + 1e-9)
            if changed.any() and (~changed).any():
                assert np.abs(w[changed]).max() <= np.abs(w[~changed]).min()

        # global scope selects floor(N*k) across the pooled weights
        cfg_g = SurgeryConfig(prune=spec, reinit=ReinitKind.NS, seed=5,
                              bias_reset=False, scope="global")
        out_g, _ = apply_surgery(cp, cfg_g)
        pooled = np.concatenate([cp.tensors[n] for n in sorted(sizes)])
        changed_g = np.concatenate(
            [out_g.tensors[n] != cp.tensors[n] for n in sorted(sizes)]
        )
        assert changed_g.sum() == math.floor(sum(sizes.values()) * k + 1e-9)
        assert np.abs(pooled[changed_g]).max() <= np.abs(pooled[~changed_g]).min()


# ---------------------------------------------------------------------------
# 3. Identity cases: floor(n*k) = 0 with bias reset off leaves the
#    checkpoint bit-identical; an empty mask is an identity reinit for
#    all four strategies.


def test_acceptance_identity_cases_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    cp = Checkpoint()
    cp.add("fc1.weight", rng.normal(size=(12, 10)))
    cp.add("fc1.bias", rng.normal(size=12))
    cp.add("fc2.weight", rng.normal(size=(4, 12)))
    cfg = SurgeryConfig(
        prune=PruneSpec.proportional(0.005),  # floor(120 * 0.005) = 0
        reinit=ReinitKind.MN,
        bias_reset=False,
        seed=3,
    )
    out, report = apply_surgery(cp, cfg)
    before, after = tmp_path / "in.ckpt", tmp_path / "out.ckpt"
    save_checkpoint(cp, before)
    save_checkpoint(out, after)
    assert before.read_bytes() == after.read_bytes()
    assert report.totals["n_changed"] == 0

    t = rng.normal(size=301)
    empty = np.zeros(301, dtype=bool)
    for kind in ReinitKind:
        redone = reinit_apply(t, empty, kind, np.random.default_rng(0))
        assert redone.tobytes() == t.tobytes(), kind


# ---------------------------------------------------------------------------
# 4. Reinit distribution: with >= 1e5 pruned entries, NS is centered on 0
#    (±0.002) with std within 1% of 0.2; N std within 1% of 1.0; MN mean
#    within 3*(scale/sqrt(n)) of the layer mean and std within 2% of a
#    tenth of the remaining-weight magnitude.


def test_acceptance_reinit_distribution_tolerances():
    rng = np.random.default_rng(13)
    original = rng.normal(3.0, 2.0, size=200_000)
    cp = Checkpoint(tensors={"big.weight": original})
    spec = PruneSpec.proportional(0.5)

    def drawn(kind, seed):
        cfg = SurgeryConfig(prune=spec, reinit=kind, seed=seed, bias_reset=False)
        out, _ = apply_surgery(cp, cfg)
        changed = out.tensors["big.weight"] != original
        assert changed.sum() == 100_000
        return out.tensors["big.weight"][changed], changed

    ns_values, _ = drawn(ReinitKind.NS, 1)
    assert abs(ns_values.mean()) < 0.002
    assert abs(ns_values.std() - 0.2) < 0.01 * 0.2

    n_values, _ = drawn(ReinitKind.N, 2)
    assert abs(n_values.std() - 1.0) < 0.01 * 1.0

    mn_values, mask = drawn(ReinitKind.MN, 3)
    mu = original.mean()
    scale = noise_scale(original, mask)
    n = mn_values.size
    assert abs(mn_values.mean() - mu) < 3.0 * scale / math.sqrt(n)
    assert abs(mn_values.std() - scale) < 0.02 * scale


# ---------------------------------------------------------------------------
# 5. Mann-Whitney U: exact p-values match a pairwise-counting brute-force
#    oracle on 10,000 random tie-free integer cases with n+m <= 10;
#    [4,5,6] vs [1,2,3] (greater) gives exactly 0.05; exact and normal
#    approximation agree within 0.01 at n = m = 10.


@lru_cache(maxsize=None)
def _combo_index_pairs(big_n: int, n: int):
    combos = np.array(list(itertools.combinations(range(big_n), n)), dtype=np.intp)
    total = len(combos)
    mask = np.zeros((total, big_n), dtype=bool)
    mask[np.arange(total)[:, None], combos] = True
    complements = np.nonzero(~mask)[1].reshape(total, big_n - n)
    return combos, complements


def oracle_exact_p_tie_free(a: np.ndarray, b: np.ndarray, alternative: str) -> float:
    pooled = np.concatenate([a, b])
    u_obs = int(np.sum(a[:, None] > b[None, :]))
    combos, complements = _combo_index_pairs(len(pooled), len(a))
    a_vals = pooled[combos]
    b_vals = pooled[complements]
    u_all = (a_vals[:, :, None] > b_vals[:, None, :]).sum(axis=(1, 2))
    if alternative == "greater":
        hits = int(np.count_nonzero(u_all >= u_obs))
    else:
        hits = int(np.count_nonzero(u_all <= u_obs))
    return hits / len(u_all)


def test_acceptance_mwu_exact_oracle_and_pinned_examples():
    res = mann_whitney_u([4, 5, 6], [1, 2, 3], "greater")
    assert res.p_exact == 0.05  # exactly 1 of the 20 labelings

    rng = np.random.default_rng(17)
    for _ in range(10_000):
        big_n = int(rng.integers(2, 11))
        n = int(rng.integers(1, big_n))
        vals = rng.choice(100_000, size=big_n, replace=False).astype(np.float64)
        a, b = vals[:n], vals[n:]
        alternative = "greater" if rng.random() < 0.5 else "less"
        got = mann_whitney_u(a, b, alternative)
        assert got.method_used == "exact"
        expected = oracle_exact_p_tie_free(a, b, alternative)
        assert got.p_exact == pytest.approx(expected, abs=1e-12)

    for _ in range(200):
        a = rng.normal(0.5, 1.0, 10)
        b = rng.normal(0.0, 1.0, 10)
        res = mann_whitney_u(a, b, "greater")
        assert res.method_used == "exact"
        assert abs(res.p_exact - res.p_approx) <= 0.01


# ---------------------------------------------------------------------------
# 6. Gradient check: analytic backward matches central finite differences
#    to a relative error below 1e-4 on 100 random parameters in float64.


def test_acceptance_gradient_check_vs_central_differences():
    model = MLP.init([6, 12, 9, 4], np.random.default_rng(19))
    rng = np.random.default_rng(20)
    x = rng.normal(size=(16, 6))
    y = rng.integers(0, 4, 16)
    _, grads = loss_and_grads(model, x, y)
    h = 1e-5
    names = sorted(grads)
    worst = 0.0
    for _ in range(100):
        name = names[int(rng.integers(len(names)))]
        idx = int(rng.integers(grads[name].size))
        layer = int(name.split(".")[1])
        is_weight = name.endswith("weight")

        def loss_with(value):
            probe = model.copy()
            arr = probe.weights[layer] if is_weight else probe.biases[layer]
            arr.flat[idx] = value
            return loss_and_grads(probe, x, y)[0]

        base = model.weights[layer] if is_weight else model.biases[layer]
        w0 = float(base.flat[idx])
        numeric = (loss_with(w0 + h) - loss_with(w0 - h)) / (2.0 * h)
        analytic = float(grads[name].flat[idx])
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, rel)
    assert worst < 1e-4, f"worst relative gradient error {worst:.2e}"


# ---------------------------------------------------------------------------
# 7. Early stopping: a frozen validation accuracy stops training at exactly
#    patience + 1 epochs (epoch 11 with patience 10).


def test_acceptance_early_stopping_stops_at_patience_plus_one():
    model = MLP.init([6, 8, 3], np.random.default_rng(23))
    rng = np.random.default_rng(24)
    x = rng.normal(size=(60, 6))
    y = rng.integers(0, 3, 60)
    from replast.tinytrain import Dataset

    ds = Dataset(x, y)
    config = TrainConfig(lr=1e-12, batch_size=16, max_epochs=100, patience=10)
    result = train(model, ds, ds, config, np.random.default_rng(25))
    assert result.stop_epoch == 11
    assert result.best_epoch == 1
    assert len(result.val_history) == 11


# ---------------------------------------------------------------------------
# 8. Histogram contract: the difference histogram equals the absolute
#    per-bin count difference on 1,000 random checkpoint pairs.


def test_acceptance_histogram_diff_contract_1000_pairs():
    rng = np.random.default_rng(29)
    for _ in range(1000):
        n_tensors = int(rng.integers(1, 4))
        base = Checkpoint()
        exp = Checkpoint()
        for j in range(n_tensors):
            size = int(rng.integers(1, 120))
            vals = rng.normal(rng.normal(), 1.0 + rng.random(), size)
            base.add(f"l{j}.weight", vals)
            exp.add(f"l{j}.weight", vals * rng.normal(1.0, 0.5) + rng.normal())
        bins = int(rng.integers(2, 40))
        hset = build_histogram_set(base, exp, bins=bins)
        np.testing.assert_array_equal(
            hset.diff.counts,
            np.abs(hset.base.counts - hset.experimental.counts),
        )


# ---------------------------------------------------------------------------
# 9. End-to-end protocol fidelity: the bundled demo protocol finishes well
#    inside its time budget, renders the comparison table layout, is
#    bit-reproducible, and matches the regression values pinned from its
#    own first run. The direction of the effect is recorded, not gated.


_DEMO_EXPECTED = {
    # case: (accuracy mean, epochs-to-convergence mean)
    "Base": (97.53333333333333, 9.5),
    "5M": (97.46666666666667, 10.5),
    "10M": (97.33333333333334, 9.6),
    "25M": (97.63333333333333, 9.4),
    "10MN": (97.4, 8.6),
}


def test_acceptance_demo_protocol_fidelity(tmp_path):
    from importlib.resources import files

    from replast.tinytrain import load_protocol

    proto_path = files("replast").joinpath("protocols/demo.json")
    protocol = load_protocol(str(proto_path))
    assert protocol.task.dim == 16
    assert protocol.task.n_classes == 4
    assert protocol.task.n_per_class == 500
    assert protocol.reps == 10
    assert protocol.train.patience == 10
    assert set(protocol.cases) == {"Base", "5M", "10M", "25M", "10MN"}

    start = time.perf_counter()
    result = run_experiment(protocol, tmp_path / "run1")
    elapsed = time.perf_counter() - start
    assert elapsed < 600.0, f"demo protocol took {elapsed:.0f}s"

    table = (tmp_path / "run1" / "table.txt").read_text()
    lines = table.splitlines()
    assert lines[0].split()[:1] == ["Case"]
    assert "Accuracy ± Std" in lines[0] and "Epochs ± Std" in lines[0]
    assert "p (acc >)" in lines[0] and "p (epochs <)" in lines[0]
    assert sum("±" in line for line in lines[2:]) == 5  # one row per case
    assert any(line.startswith("Base *") for line in lines)

    run_experiment(protocol, tmp_path / "run2")
    assert (tmp_path / "run1" / "runs.csv").read_bytes() == (
        tmp_path / "run2" / "runs.csv"
    ).read_bytes()

    by_case = {row.tag: row for row in result.report.rows}
    assert set(by_case) == set(_DEMO_EXPECTED)
    for case, (acc_mean, ep_mean) in _DEMO_EXPECTED.items():
        assert by_case[case].accuracy.mean == pytest.approx(acc_mean, rel=1e-9), case
        assert by_case[case].epochs.mean == pytest.approx(ep_mean, rel=1e-9), case


# ---------------------------------------------------------------------------
# 10. Saturation targeting: magnitude surgery at the saturation fraction
#     recovers at least 90% of the induced near-zero entries (10 seeds).


def test_acceptance_saturation_targeting_overlap():
    for seed in range(10):
        model = MLP.init([16, 32, 32, 4], substream(seed, "init"))
        cp = model_to_checkpoint(model)
        saturated = induce_saturation(cp, 0.3, seed=seed)
        cfg = SurgeryConfig(
            prune=PruneSpec.proportional(0.3),
            reinit=ReinitKind.NS,
            seed=seed,
            bias_reset=False,
        )
        out, _ = apply_surgery(saturated, cfg)
        n_induced = 0
        n_recovered = 0
        for name in ("layers.0.weight", "layers.1.weight"):
            induced = saturated.tensors[name] != cp.tensors[name]
            selected = out.tensors[name] != saturated.tensors[name]
            n_induced += induced.sum()
            n_recovered += (induced & selected).sum()
        assert n_induced > 0
        assert n_recovered / n_induced >= 0.90, f"seed {seed}"
