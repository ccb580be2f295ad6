import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtmxai.errors import DTMError, InstabilityError, StratificationError, UndefinedMetricError
from dtmxai.evaluation import (MetricsTable, auc, bootstrap_ci, confusion, confusion_metrics,
                               nll_p1, pooled_metrics, select_threshold, stratified_kfold,
                               threshold_candidates, wilson_ci)

Z = 1.959964


def brute_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def dense_scan(scores, labels, n=10_001):
    grid = np.linspace(0, 1, n)
    pos, neg = scores[labels == 1], scores[labels == 0]
    tpr = np.array([(pos > t).mean() for t in grid])
    tnr = np.array([(neg <= t).mean() for t in grid])
    gm = np.sqrt(tpr * tnr)
    return grid[np.argmax(gm)], gm.max()


# -- folds -----------------------------------------------------------------


def test_balanced_two_folds():
    y = np.r_[np.zeros(10, int), np.ones(10, int)]
    fa = stratified_kfold(y, 2, 0)
    for f in range(2):
        idx = fa.test_index(f)
        assert (y[idx] == 0).sum() == 5 and (y[idx] == 1).sum() == 5


def test_cohort_folds_have_7_or_8_unfavorable():
    y = np.r_[np.zeros(332, int), np.ones(75, int)]
    fa = stratified_kfold(y, 10, 3)
    counts = [y[fa.test_index(f)].sum() for f in range(10)]
    assert set(counts) <= {7, 8} and sum(counts) == 75


@given(st.integers(0, 10_000), st.integers(2, 10), st.integers(10, 60), st.integers(10, 60))
def test_folds_partition_and_stratify(seed, k, n0, n1):
    y = np.r_[np.zeros(n0, int), np.ones(n1, int)]
    fa = stratified_kfold(y, k, seed)
    tests = [fa.test_index(f) for f in range(k)]
    assert sorted(np.concatenate(tests).tolist()) == list(range(len(y)))
    for idx in tests:
        for cls, n in ((0, n0), (1, n1)):
            assert abs((y[idx] == cls).sum() - n / k) < 1


def test_folds_deterministic_and_validated():
    y = np.r_[np.zeros(30, int), np.ones(12, int)]
    np.testing.assert_array_equal(stratified_kfold(y, 4, 9).folds, stratified_kfold(y, 4, 9).folds)
    with pytest.raises(StratificationError):
        stratified_kfold(y, 13, 0)
    with pytest.raises(StratificationError):
        stratified_kfold(y, 1, 0)


# -- AUC -------------------------------------------------------------------


def test_auc_edge_cases():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


@pytest.mark.parametrize("seed", range(50))
def test_auc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = 200 if seed < 5 else int(rng.integers(5, 120))
    y = rng.integers(0, 2, n)
    y[:2] = [0, 1]
    # rounding creates ties
    s = np.round(rng.random(n), int(rng.integers(1, 4)))
    assert auc(s, y) == brute_auc(s, y)


@given(st.integers(0, 10_000))
def test_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 40)
    y[:2] = [0, 1]
    s = rng.normal(size=40)
    assert auc(s, y) == auc(np.exp(s) * 3 + 1, y)


# -- confusion metrics -----------------------------------------------------


def test_all_favorable_prediction_on_cohort():
    y = np.r_[np.zeros(332, int), np.ones(75, int)]
    m = confusion_metrics(np.zeros(407, int), y)
    assert m["specificity"] == 1.0 and m["sensitivity"] == 0.0 and m["f1"] == 0.0
    assert round(m["accuracy"], 3) == 0.816


def test_perfect_prediction():
    y = np.array([0, 1, 1, 0, 1])
    assert all(v == 1.0 for v in confusion_metrics(y, y).values())


def test_hand_confusion():
    # TP=3, FP=1, FN=1, TN=5
    y = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
    p = np.array([1, 1, 1, 0, 1, 0, 0, 0, 0, 0])
    c = confusion(p, y)
    assert (c.tp, c.fp, c.fn, c.tn) == (3, 1, 1, 5)
    m = confusion_metrics(p, y)
    assert m["sensitivity"] == 0.75 and m["accuracy"] == 0.8 and m["f1"] == 0.75
    assert m["specificity"] == pytest.approx(5 / 6, abs=1e-15)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=2, max_size=80))
def test_accuracy_prevalence_identity(pairs):
    p, y = map(np.array, zip(*pairs))
    if y.min() == y.max():
        return
    m = confusion_metrics(p, y)
    pi1 = y.mean()
    assert m["accuracy"] == pytest.approx(m["sensitivity"] * pi1 + m["specificity"] * (1 - pi1),
                                          abs=1e-12)


def test_confusion_rejects_empty():
    with pytest.raises(DTMError):
        confusion([], [])


# -- Wilson ----------------------------------------------------------------


def test_wilson_table_bounds():
    lo, hi = wilson_ci(332, 332)
    assert hi == 1.0 and lo == pytest.approx(332 / (332 + Z * Z), abs=1e-12)
    assert round(lo, 3) == 0.989
    lo, hi = wilson_ci(0, 75)
    assert lo == 0.0 and hi == pytest.approx(Z * Z / (75 + Z * Z), abs=1e-12)
    assert round(hi, 3) == 0.049


def test_wilson_half_is_symmetric():
    lo, hi = wilson_ci(50, 100)
    assert abs((lo + hi) / 2 - 0.5) < 1e-12


@given(st.integers(1, 500), st.data())
def test_wilson_mirror(n, data):
    s = data.draw(st.integers(0, n))
    lo, hi = wilson_ci(s, n)
    lo2, hi2 = wilson_ci(n - s, n)
    assert lo == pytest.approx(1 - hi2, abs=1e-12)
    assert hi == pytest.approx(1 - lo2, abs=1e-12)
    assert lo <= s / n <= hi


def test_wilson_validation():
    with pytest.raises(DTMError):
        wilson_ci(0, 0)
    with pytest.raises(DTMError):
        wilson_ci(5, 4)


# -- bootstrap -------------------------------------------------------------


def test_bootstrap_constant_metric(rng):
    y = rng.integers(0, 2, 50)
    assert bootstrap_ci(lambda s, yy: 0.7, rng.random(50), y, B=200) == (0.7, 0.7)


def test_bootstrap_auc_coverage():
    hits = 0
    for r in range(100):
        rng = np.random.default_rng(r)
        y = rng.integers(0, 2, 150)
        s = rng.normal(size=150) + 0.8 * y
        lo, hi = bootstrap_ci(auc, s, y, B=300, seed=r)
        hits += lo <= auc(s, y) <= hi
    assert hits >= 95


def test_bootstrap_stable_in_B(rng):
    y = rng.integers(0, 2, 400)
    s = rng.normal(size=400) + y
    a = bootstrap_ci(auc, s, y, B=2000, seed=1)
    b = bootstrap_ci(auc, s, y, B=4000, seed=1)
    assert abs(a[0] - b[0]) <= 0.01 and abs(a[1] - b[1]) <= 0.01


def test_bootstrap_instability():
    # one unfavorable in 30: most resamples lack it and are redrawn
    y = np.r_[np.zeros(29, int), 1]
    with pytest.raises(InstabilityError):
        bootstrap_ci(auc, np.linspace(0, 1, 30), y, B=200)

    def flaky(s, yy):
        raise UndefinedMetricError("never defined")

    with pytest.raises(InstabilityError):
        bootstrap_ci(flaky, np.linspace(0, 1, 30), np.arange(30) % 2, B=200)


def test_bootstrap_validation(rng):
    with pytest.raises(DTMError):
        bootstrap_ci(auc, [0.1, 0.2], [0, 1], B=50)


# -- thresholds ------------------------------------------------------------


def test_threshold_perfect_separation():
    rule = select_threshold([0.2, 0.2, 0.8, 0.8], [0, 0, 1, 1])
    assert rule.threshold == 0.5 and rule.geometric_mean == 1.0


def test_threshold_identical_scores_balanced():
    rule = select_threshold(np.full(10, 0.3), np.arange(10) % 2)
    assert rule.geometric_mean == 0.0
    assert rule.threshold == 0.0


def test_threshold_identical_scores_majority_favorable():
    # geometric mean is 0 everywhere; the accuracy tie-break predicts the majority class
    y = np.r_[np.zeros(30, int), np.ones(7, int)]
    rule = select_threshold(np.full(37, 0.18), y)
    assert rule.geometric_mean == 0.0 and rule.threshold == 1.0
    assert not rule.apply(np.full(5, 0.18)).any()


@pytest.mark.parametrize("seed", range(10))
def test_threshold_matches_dense_scan(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 200)
    p1 = 1 / (1 + np.exp(-(2.0 * y - 1 + rng.normal(size=200))))
    rule = select_threshold(p1, y)
    t_scan, gm_scan = dense_scan(p1, y)
    assert rule.geometric_mean >= gm_scan - 1e-12
    cand = threshold_candidates(p1)
    pos = np.searchsorted(cand, rule.threshold)
    gap = max(cand[min(pos + 1, len(cand) - 1)] - cand[pos], cand[pos] - cand[max(pos - 1, 0)])
    # the scan optimum lies in the same inter-score interval, within one candidate gap
    assert abs(t_scan - rule.threshold) <= gap


@given(st.integers(0, 10_000))
def test_threshold_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 60)
    y[:2] = [0, 1]
    val = rng.random(60)
    test = rng.random(30)
    f = lambda s: s ** 3
    rule = select_threshold(val, y)
    rule_f = select_threshold(f(val), y)
    np.testing.assert_array_equal(rule.apply(val), rule_f.apply(f(val)))
    # midpoints do not commute with f, so only scores outside the bracketing gap are pinned
    below, above = val[val <= rule.threshold], val[val > rule.threshold]
    lo = below.max() if below.size else -np.inf
    hi = above.min() if above.size else np.inf
    outside = (test <= lo) | (test >= hi)
    np.testing.assert_array_equal(rule.apply(test)[outside], rule_f.apply(f(test))[outside])


def test_threshold_needs_both_classes():
    with pytest.raises(UndefinedMetricError):
        select_threshold([0.1, 0.4], [0, 0])


# -- table -----------------------------------------------------------------


def test_pooled_metrics_and_table(tmp_path, rng):
    y = rng.integers(0, 2, 120)
    p1 = np.clip(0.3 * y + rng.random(120) * 0.7, 0.01, 0.99)
    pred = (p1 > 0.5).astype(int)
    m = pooled_metrics(p1, pred, y, B=200, seed=0)
    for name, v in m.items():
        assert v.low <= v.estimate <= v.high, name
    assert m["nll"].estimate == pytest.approx(nll_p1(p1, y))
    table = MetricsTable()
    table.add("SI", m)
    table.add("CI", m)
    table.to_csv(tmp_path / "m.csv")
    back = MetricsTable.from_csv(tmp_path / "m.csv")
    assert back.columns == table.columns
    text = table.to_text()
    lines = text.splitlines()
    assert lines[0].split() == ["SI", "CI"]
    assert [l.split()[0] for l in lines[1:]] == ["NLL", "AUC", "Specificity", "Sensitivity",
                                                "Accuracy", "F1-score"]
    assert "[" in lines[1] and "]" in lines[1]
