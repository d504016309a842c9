import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from anomography.anomtest import (
    REPLICA_SUM,
    RocCurve,
    TestResult,
    anomaly_test,
    auc_pairwise,
    critical_value,
    edge_flags,
    edge_statistics,
    operating_point,
    psi_statistic,
    roc_curve,
    surrogate_log_model,
)
from anomography.hpem import HIER, MAP, MLEM, EmConfig, run_em
from anomography.netsim import (
    FlowMap,
    ObservationSet,
    ScenarioSpec,
    apply_rate_anomalies,
    gen_baseline,
    gen_flowmap,
    observe,
    sample_traffic,
)


def _fit(seed, variant=MAP, P=5, T=40, frac=0.3, map_eps=2.0):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(0.5, 3.0, size=(P, P))
    np.fill_diagonal(lam, 0)
    fm = gen_flowmap(P, 2, 6, seed)
    obs = observe(sample_traffic(lam, T, seed), fm, frac, seed)
    lam0 = lam * rng.uniform(0.6, 1.4, size=lam.shape)
    fit = run_em(obs, lam0, variant=variant, init="random", cfg=EmConfig(map_eps=map_eps, max_iter=200))
    return fit, lam0


def _dense_surrogate(fit, rates):
    total = 0.0
    off = ~np.eye(rates.shape[0], dtype=bool)
    for rep in fit.final_counts.replicas():
        for t in range(rep.shape[0]):
            for i, j in zip(*np.nonzero(off)):
                n = rep[t, i, j]
                total += (n * math.log(rates[i, j]) if n > 0 else 0.0) - rates[i, j]
    if fit.variant != MLEM:
        eps = np.broadcast_to(fit.eps_hat, rates.shape)
        for i, j in zip(*np.nonzero(off)):
            a = eps[i, j] * fit.lam0[i, j]
            total += (a * math.log(rates[i, j]) if a > 0 else 0.0) - eps[i, j] * rates[i, j]
    return total


def test_surrogate_matches_term_by_term_sum():
    for seed, variant in [(1, MLEM), (2, MAP), (3, HIER)]:
        fit, lam0 = _fit(seed, variant, P=4, T=8)
        rates = lam0 + 0.1 * (lam0 > 0)
        assert surrogate_log_model(fit, rates) == pytest.approx(_dense_surrogate(fit, rates), rel=1e-9)


def test_surrogate_without_counts_is_minus_total_rate():
    P, T = 3, 5
    # one flow set covering every edge, so zero aggregates pin all counts to zero
    fm = FlowMap((tuple((i, j) for i in range(P) for j in range(P) if i != j),))
    obs = ObservationSet(np.zeros((T, P)), np.zeros((T, P)), np.zeros((T, 1)), fm)
    lam0 = np.ones((P, P)) - np.eye(P)
    fit = run_em(obs, lam0, variant=MLEM, init="baseline", cfg=EmConfig(max_iter=1))
    rates = np.array([[0, 1.0, 2.0], [0.5, 0, 1], [3, 1, 0]])
    assert surrogate_log_model(fit, rates) == pytest.approx(-(2 + 1) * T * rates.sum())


def test_surrogate_argmax_is_poisson_mle():
    obs = ObservationSet([[3, 0]], [[0, 3]], np.zeros((1, 0)), FlowMap(()), ((0, 1),), [[3]])
    fit = run_em(obs, np.array([[0, 1.0], [0, 0]]), variant=MLEM, init="baseline")
    grid = np.linspace(0.01, 10, 10_000)
    vals = [surrogate_log_model(fit, np.array([[0, g], [0, 0]])) for g in grid]
    assert grid[int(np.argmax(vals))] == pytest.approx(3.0, abs=1e-3)
    assert fit.lambda_hat[0, 1] == 3.0


def test_surrogate_zero_rate_with_counts_is_minus_inf():
    fit, lam0 = _fit(4, MLEM)
    rates = lam0.copy()
    rates[0, 1] = 0.0
    assert surrogate_log_model(fit, rates) == -math.inf
    with pytest.raises(ValueError):
        surrogate_log_model(fit, -lam0)


@pytest.mark.parametrize("variant", [MLEM, MAP])
def test_psi_equals_surrogate_difference(variant):
    for seed in range(5):
        fit, lam0 = _fit(seed, variant)
        direct = -2 * (surrogate_log_model(fit, lam0) - surrogate_log_model(fit, fit.lambda_hat))
        n = fit.final_counts.n_replicas
        assert psi_statistic(fit, lam0) == pytest.approx(direct / n, rel=1e-7, abs=1e-8)
        assert psi_statistic(fit, lam0, scale=REPLICA_SUM) == pytest.approx(direct, rel=1e-7, abs=1e-8)


def test_psi_zero_at_fitted_rates():
    for variant in (MLEM, MAP, HIER):
        fit, _ = _fit(7, variant)
        assert psi_statistic(fit, fit.lambda_hat) == 0.0
        res = anomaly_test(fit, fit.lambda_hat)
        assert res.psi_hat == 0.0 and not res.reject
        assert edge_flags(fit, fit.lambda_hat) == set()


@given(seed=st.integers(0, 10_000), scale=st.floats(0.05, 5.0), variant=st.sampled_from([MLEM, MAP, HIER]))
def test_psi_nonnegative(seed, scale, variant):
    fit, lam0 = _fit(seed % 50, variant, P=4, T=20)
    rng = np.random.default_rng(seed)
    other = lam0 * scale * rng.uniform(0.5, 1.5, size=lam0.shape)
    assert psi_statistic(fit, other) >= -1e-8
    assert np.all(edge_statistics(fit, other) >= -1e-8)
    if variant != HIER:
        # the surrogate difference itself; HIER's large prior weights make it cancel badly
        direct = -2 * (surrogate_log_model(fit, other) - surrogate_log_model(fit, fit.lambda_hat))
        assert direct >= -1e-8 * max(1.0, abs(surrogate_log_model(fit, other)))


def test_structural_mismatch():
    fit, lam0 = _fit(8, MLEM)
    lam0 = lam0.copy()
    lam0[1, 2] = 0.0
    assert fit.lambda_hat[1, 2] > 0
    res = anomaly_test(fit, lam0)
    assert math.isinf(res.psi_hat) and res.reject and res.structural_mismatch
    assert res.mismatch_edges == [(1, 2)]
    assert (1, 2) in edge_flags(fit, lam0)


def test_critical_value_and_decision():
    assert critical_value(10, 0.05) == pytest.approx(113.145, abs=1e-3)
    fit, lam0 = _fit(9, MAP)
    res = anomaly_test(fit, lam0, alpha=0.05)
    assert res.df == 20 and res.critical_value == critical_value(5, 0.05)
    assert res.reject == (res.psi_hat > res.critical_value)
    with pytest.raises(ValueError):
        critical_value(10, 0.0)


@given(a=st.floats(1e-4, 0.99), b=st.floats(1e-4, 0.99), seed=st.integers(0, 30))
def test_monotone_in_alpha(a, b, seed):
    lo, hi = sorted((a, b))
    fit, lam0 = _fit(seed, MAP, P=4, T=15)
    if anomaly_test(fit, lam0, alpha=lo).reject:
        assert anomaly_test(fit, lam0, alpha=hi).reject


def test_result_json_round_trip():
    fit, lam0 = _fit(10, MLEM)
    lam0 = lam0.copy()
    lam0[0, 1] = 0.0
    res = anomaly_test(fit, lam0, window_terms=True)
    assert len(res.per_window_terms) == 40
    back = TestResult.from_json(res.to_json())
    assert back == res
    fin = anomaly_test(*_fit(11, MAP))
    assert TestResult.from_json(fin.to_json()) == fin


def test_edge_flags_bonferroni_subset_and_no_diagonal():
    fit, lam0 = _fit(12, MLEM, T=200)
    plain = edge_flags(fit, lam0 * 0.7)
    strict = edge_flags(fit, lam0 * 0.7, bonferroni=True)
    assert strict <= plain
    assert all(i != j for i, j in plain)


def test_edge_flag_power_and_false_flags():
    spec = ScenarioSpec(seed=31)
    hits, false_rate = 0, []
    n = 20
    for i in range(n):
        tspec = spec.with_seed(1000 + i)
        base = gen_baseline(tspec)
        support = np.argwhere(base > 0)
        edge = tuple(support[np.random.default_rng(i).integers(len(support))])
        truth = base.copy()
        truth[edge] *= 6.0  # increment of five times the baseline rate
        fm = gen_flowmap(10, 2, 7, (i, 2))
        obs = observe(sample_traffic(truth, 100, (i, 3)), fm, 0.2, (i, 4))
        hits += edge in edge_flags(run_em(obs, base, variant=HIER, init="mre"), base)
        obs0 = observe(sample_traffic(base, 100, (i, 5)), fm, 0.2, (i, 4))
        false_rate.append(len(edge_flags(run_em(obs0, base, variant=HIER, init="mre"), base)) / 90)
    assert hits / n >= 0.95
    assert np.mean(false_rate) <= 3 * 0.05


def _supported_anomaly_pairs(T, shift=0.0, n=12):
    spec = ScenarioSpec(seed=31)
    out = []
    for i in range(n):
        tspec = spec.with_seed(500 + i)
        base = gen_baseline(tspec)
        inc = apply_rate_anomalies(base, tspec) - base
        truth = np.where(base > 0, base + inc + shift * (inc > 0), 0.0)
        out.append((i, base, truth, gen_flowmap(10, 2, 7, (i, 2))))
    return out


def test_psi_grows_linearly_with_windows():
    # every edge observed keeps the statistic finite; increases on supported edges only
    ratios = []
    for i, base, truth, fm in _supported_anomaly_pairs(200):
        N = sample_traffic(truth, 200, (i, 3))
        short = psi_statistic(run_em(observe(N[:100], fm, 1.0, 0), base, variant=HIER, init="mre"), base)
        full = psi_statistic(run_em(observe(N, fm, 1.0, 0), base, variant=HIER, init="mre"), base)
        ratios.append(full / short)
    assert 1.6 <= np.median(ratios) <= 2.4


def test_larger_anomalies_do_not_weaken_evidence():
    meds = []
    for shift in (0.0, 1.0):
        psi = []
        for i, base, truth, fm in _supported_anomaly_pairs(100, shift):
            N = sample_traffic(truth, 100, (i, 3))
            psi.append(psi_statistic(run_em(observe(N, fm, 1.0, 0), base, variant=HIER, init="mre"), base))
        meds.append(np.median(psi))
    assert meds[1] >= meds[0]


def test_roc_perfect_and_constant():
    stats = [0.1, 0.2, 0.3, 0.9, 1.5, 2.0]
    labels = [False, False, False, True, True, True]
    assert roc_curve(stats, labels).auc == 1.0
    const = roc_curve([4.0] * 6, labels)
    assert const.auc == 0.5
    assert const.points == [(0.0, 0.0), (1.0, 1.0)]


def test_roc_random_labels_near_half():
    rng = np.random.default_rng(0)
    s = rng.random(4000)
    y = rng.random(4000) < 0.5
    assert abs(roc_curve(s, y).auc - 0.5) < 0.03


def test_roc_hand_cases():
    stats = [0.1, 0.4, 0.35, 0.8]
    # pairs as listed: positives 0.4 and 0.8 outrank both negatives
    listed = [False, True, False, True]
    assert roc_curve(stats, listed).auc == pytest.approx(auc_pairwise(stats, listed)) == 1.0
    # the familiar labelling of these scores: one of four pairs misordered
    classic = [False, False, True, True]
    assert roc_curve(stats, classic).auc == pytest.approx(0.75)
    assert auc_pairwise(stats, classic) == pytest.approx(0.75)


@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
def test_roc_matches_mann_whitney_and_is_monotone(pairs):
    s = [float(a) for a, _ in pairs]
    y = [b for _, b in pairs]
    if all(y) or not any(y):
        with pytest.raises(ValueError):
            roc_curve(s, y)
        return
    curve = roc_curve(s, y)
    assert curve.auc == pytest.approx(auc_pairwise(s, y), abs=1e-12)
    assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
    back = RocCurve.from_csv(curve.to_csv())
    np.testing.assert_array_equal(back.fpr, curve.fpr)
    np.testing.assert_array_equal(back.thresholds, curve.thresholds)
    assert back.auc == curve.auc
    j = RocCurve.from_json(curve.to_json())
    np.testing.assert_array_equal(j.tpr, curve.tpr) and j.auc == curve.auc


def test_roc_input_errors():
    with pytest.raises(ValueError):
        roc_curve([1.0, 2.0], [True, True])
    with pytest.raises(ValueError):
        roc_curve([1.0, np.nan], [True, False])
    with pytest.raises(ValueError):
        roc_curve([1.0], [True, False])


def test_operating_point_and_infinite_statistics():
    s = [0.5, math.inf, 200.0, 3.0, math.inf]
    y = [False, True, True, False, False]
    assert operating_point(s, y, 113.145) == (pytest.approx(1 / 3), 1.0)
    curve = roc_curve(s, y)
    assert curve.thresholds[1] == math.inf
    assert RocCurve.from_csv(curve.to_csv()).thresholds[1] == math.inf
