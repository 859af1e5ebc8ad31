import time

import numpy as np
import pytest
import scipy.stats
from conftest import brute_midranks

from mobileone.bench import (
    CorrReport,
    LatencyStats,
    _midranks,
    _t_sf_two_sided,
    ablation_net,
    benchmark,
    correlate,
    emit_report,
    load_fixture,
    read_report,
    spearman,
    spearman_exact_p,
)
from mobileone.zoo import count_params

# ---------------------------------------------------------------------------
# Timing harness


def test_benchmark_stats_are_ordered():
    stats = benchmark(lambda x: x.sum(), (1, 3, 4, 4), warmup=2, iters=50)
    assert stats.min_ns <= stats.median_ns <= stats.p90_ns <= stats.p99_ns
    assert stats.iterations == 50 and stats.warmup == 2
    assert stats.min_ns > 0


def test_benchmark_excludes_warmup():
    calls = {"n": 0}

    def runner(x):
        calls["n"] += 1
        if calls["n"] == 1:
            time.sleep(0.05)

    stats = benchmark(runner, (1, 1, 2, 2), warmup=1, iters=20)
    assert calls["n"] == 21
    # the 50 ms spike landed in warmup, so even the max timed call is fast
    assert stats.p99_ns < 25_000_000


def test_benchmark_reports_failing_iteration():
    calls = {"n": 0}

    def runner(x):
        calls["n"] += 1
        if calls["n"] == 5:  # 2 warmup + timed iterations 0..2 succeed
            raise ValueError("boom")

    with pytest.raises(RuntimeError, match="iteration 2"):
        benchmark(runner, (1, 1, 2, 2), warmup=2, iters=20)


def test_benchmark_reports_warmup_failure():
    def runner(x):
        raise ValueError("cold start")

    with pytest.raises(RuntimeError, match="warmup"):
        benchmark(runner, (1, 1, 2, 2), warmup=1, iters=5)


def test_benchmark_validates_counts():
    with pytest.raises(ValueError):
        benchmark(lambda x: None, (1, 1, 2, 2), iters=0)
    with pytest.raises(ValueError):
        benchmark(lambda x: None, (1, 1, 2, 2), warmup=-1)


def test_latency_stats_round_trips_to_dict():
    stats = benchmark(lambda x: None, (1, 1, 2, 2), warmup=0, iters=5)
    d = stats.as_dict()
    assert d["iterations"] == 5
    assert set(d) >= {"min_ns", "median_ns", "p90_ns", "p99_ns", "mean_ns"}


# ---------------------------------------------------------------------------
# Rank correlation


def test_midranks_match_definition():
    rng = np.random.default_rng(0)
    for _ in range(20):
        vals = rng.integers(0, 5, size=rng.integers(3, 12)).astype(float)
        np.testing.assert_allclose(_midranks(vals), brute_midranks(vals.tolist()))


def test_spearman_equals_pearson_on_midranks():
    rng = np.random.default_rng(1)
    for _ in range(30):
        n = int(rng.integers(4, 15))
        xs = rng.integers(0, 6, n).astype(float)  # ties on purpose
        ys = rng.standard_normal(n)
        if len(set(xs)) < 2:
            continue
        rho, _ = spearman(xs, ys)
        want = np.corrcoef(brute_midranks(xs.tolist()), brute_midranks(ys.tolist()))[0, 1]
        assert rho == pytest.approx(want, abs=1e-12)


def test_spearman_agrees_with_scipy():
    rng = np.random.default_rng(2)
    for _ in range(25):
        n = int(rng.integers(5, 40))
        xs = rng.standard_normal(n)
        ys = 0.5 * xs + rng.standard_normal(n)
        rho, p = spearman(xs, ys)
        ref = scipy.stats.spearmanr(xs, ys)
        assert rho == pytest.approx(ref.statistic, abs=1e-12)
        assert p == pytest.approx(ref.pvalue, abs=1e-10)


def test_spearman_is_invariant_to_monotone_transforms():
    rng = np.random.default_rng(3)
    xs = rng.standard_normal(12)
    ys = rng.standard_normal(12)
    rho, _ = spearman(xs, ys)
    rho2, _ = spearman(np.exp(xs), ys**3)
    assert rho2 == rho


def test_spearman_unit_cases():
    xs = np.arange(8.0)
    assert spearman(xs, 2 * xs + 1) == (1.0, 0.0)
    assert spearman(xs, -xs) == (-1.0, 0.0)


def test_spearman_rejects_degenerate_input():
    with pytest.raises(ValueError, match="constant"):
        spearman(np.ones(5), np.arange(5.0))
    with pytest.raises(ValueError):
        spearman(np.arange(2.0), np.arange(2.0))
    with pytest.raises(ValueError):
        spearman(np.arange(4.0), np.arange(5.0))
    with pytest.raises(ValueError):
        spearman(np.array([1.0, np.nan, 2.0]), np.arange(3.0))


def test_exact_permutation_p_matches_scipy():
    xs = np.array([3.0, 1.0, 4.0, 1.5, 9.0])
    ys = np.array([2.0, 0.5, 5.0, 1.0, 7.0])
    p = spearman_exact_p(xs, ys)

    def stat(perm_y):
        return scipy.stats.spearmanr(xs, perm_y).statistic

    ref = scipy.stats.permutation_test(
        (ys,), stat, permutation_type="pairings", n_resamples=np.inf,
        alternative="two-sided",
    )
    assert p == pytest.approx(ref.pvalue, abs=1e-12)


def test_exact_permutation_p_refuses_large_n():
    xs = np.arange(11.0)
    with pytest.raises(ValueError, match="10"):
        spearman_exact_p(xs, xs)


def test_t_tail_matches_scipy():
    for t in (0.0, 0.3, 1.5, 2.7, 10.0):
        for df in (1, 3, 8, 28):
            want = 2.0 * scipy.stats.t.sf(abs(t), df)
            assert _t_sf_two_sided(t, df) == pytest.approx(want, rel=1e-12)


def test_correlate_builds_report_from_rows():
    rows = [{"a": float(i), "b": float(i * i)} for i in range(1, 8)]
    rep = correlate(rows, "a", "b")
    assert isinstance(rep, CorrReport)
    assert rep.rho == 1.0 and rep.n == 7
    assert rep.metric_x == "a" and rep.metric_y == "b"
    with pytest.raises(KeyError, match="missing"):
        correlate(rows, "a", "nope")


# ---------------------------------------------------------------------------
# Ablation models


@pytest.mark.parametrize("act", ["relu", "gelu", "silu", "se_relu"])
def test_ablation_net_constructs_every_activation(act):
    model = ablation_net(depth=3, activation=act, channels=8)
    x = np.random.default_rng(0).standard_normal((1, 3, 8, 8)).astype(np.float32)
    y = model.forward(x, mode="eval")
    assert y.shape == (1, 8, 8, 8)
    assert np.isfinite(y).all()


def test_ablation_net_se_relu_forces_gates():
    model = ablation_net(depth=3, activation="se_relu", channels=16)
    assert all(layer.se is not None for layer in model.layers[1:])


def test_ablation_net_options_change_structure_not_shape():
    base = ablation_net(depth=4, activation="relu", channels=8)
    se = ablation_net(depth=4, activation="relu", with_se=True, channels=8)
    skip = ablation_net(depth=4, activation="relu", with_se=True, with_skip=True, channels=8)
    assert count_params(se) > count_params(base)
    assert count_params(skip) == count_params(se)  # a skip adds no tensors
    x = np.random.default_rng(1).standard_normal((1, 3, 8, 8)).astype(np.float32)
    for m in (base, se, skip):
        assert m.forward(x, mode="eval").shape == (1, 8, 8, 8)
    # the stem changes channel count, so it can never carry the skip
    assert skip.layers[0].skip is False
    assert all(layer.skip for layer in skip.layers[1:])


def test_ablation_net_validation():
    with pytest.raises(ValueError, match="activation"):
        ablation_net(activation="tanh")
    with pytest.raises(ValueError):
        ablation_net(depth=1)
    with pytest.raises(ValueError):
        ablation_net(channels=0)


# ---------------------------------------------------------------------------
# Fixture and reports


def test_fixture_loads_and_correlates():
    rows = load_fixture()
    assert len(rows) == 30
    assert {"model", "flops_m", "params_m", "cpu_ms", "mobile_ms"} <= set(rows[0])
    assert all(isinstance(r["flops_m"], float) for r in rows)
    rep = correlate(rows, "flops_m", "mobile_ms")
    assert -1.0 <= rep.rho <= 1.0 and rep.n == 30


def test_emit_report_round_trips(tmp_path):
    rows = [
        {"model": "a", "min_ns": 120.0, "median_ns": 130.5},
        {"model": "b", "min_ns": 98.25, "median_ns": 101.0},
    ]
    for name in ("r.csv", "r.json"):
        path = tmp_path / name
        emit_report(rows, path)
        cols, got = read_report(path)
        assert cols == ["model", "min_ns", "median_ns"]
        assert got == rows


def test_emit_report_header_only_for_no_rows(tmp_path):
    path = tmp_path / "empty.csv"
    emit_report([], path, columns=["min_ns", "median_ns"])
    assert path.read_text() == "min_ns,median_ns\n"


def test_emit_report_rejects_missing_columns(tmp_path):
    rows = [{"a": 1.0}, {"b": 2.0}]
    with pytest.raises(ValueError):
        emit_report(rows, tmp_path / "r.csv")


def test_emit_report_rejects_unknown_format(tmp_path):
    with pytest.raises(ValueError, match="format"):
        emit_report([{"a": 1.0}], tmp_path / "r.txt", fmt="xml")
    # an unrecognised extension falls back to CSV rather than failing
    emit_report([{"a": 1.0}], tmp_path / "r.dat")
    assert (tmp_path / "r.dat").read_text().startswith("a\n")
