import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import stats as sps

from vowelbench.stats import (
    StatReport,
    anova_oneway,
    apply_correction,
    bh_fdr,
    bonferroni,
    friedman,
    permutation_test,
    spearman,
    wilcoxon_signed_rank,
    write_stats_csv,
)


def brute_wilcoxon(d, alternative):
    """Enumerate all sign patterns of the ranked |d|."""
    d = np.asarray(d, float)
    d = d[d != 0]
    ranks = sps.rankdata(np.abs(d))
    w_obs = ranks[d < 0].sum()
    ws = np.array([sum(r for r, s in zip(ranks, signs) if s) for signs in
                   itertools.product([0, 1], repeat=len(d))])
    lower = np.mean(ws <= w_obs + 1e-9)
    upper = np.mean(ws >= w_obs - 1e-9)
    if alternative == "one_sided_greater":
        return w_obs, lower
    return w_obs, min(1.0, 2 * min(lower, upper))


def test_wilcoxon_three_positive_differences():
    r = wilcoxon_signed_rank([0.3, 0.25, 0.4], mu0=0.2)
    assert r.statistic == 0.0
    assert r.p_raw == pytest.approx(1 / 8, abs=1e-12)


def test_wilcoxon_symmetric_sample_two_sided():
    x = np.array([-3, -2, -1, 1, 2, 3], float)
    _, p_brute = brute_wilcoxon(x, "two_sided")
    r = wilcoxon_signed_rank(x, 0.0, "two_sided")
    assert r.p_raw == pytest.approx(p_brute, abs=1e-12)
    assert r.p_raw == 1.0


def test_wilcoxon_all_zero_differences(caplog):
    r = wilcoxon_signed_rank([0.2, 0.2, 0.2], mu0=0.2)
    assert r.p_raw == 1.0
    assert "zero" in caplog.text


@settings(max_examples=120, deadline=None)
@given(st.lists(st.integers(-4, 4), min_size=1, max_size=8),
       st.sampled_from(["one_sided_greater", "two_sided"]))
def test_wilcoxon_exact_matches_enumeration(values, alternative):
    d = np.array(values, float) / 2
    assume(np.any(d != 0))
    w, p = brute_wilcoxon(d, alternative)
    r = wilcoxon_signed_rank(d, 0.0, alternative)
    assert r.statistic == pytest.approx(w)
    assert r.p_raw == pytest.approx(p, abs=1e-12)


@pytest.mark.parametrize("n", [10, 16, 20])
def test_wilcoxon_exact_vs_library_without_ties(n):
    rng = np.random.default_rng(n)
    x = 0.2 + rng.normal(0.01, 0.03, size=n)
    ref = sps.wilcoxon(x - 0.2, alternative="greater", method="exact")
    r = wilcoxon_signed_rank(x, 0.2)
    assert r.extra["method"] == "exact"
    assert r.p_raw == pytest.approx(ref.pvalue, rel=1e-10)


def test_wilcoxon_normal_approximation_vs_library():
    rng = np.random.default_rng(0)
    x = rng.normal(0.2, 1.0, size=40)
    ref = sps.wilcoxon(x, alternative="greater", method="approx")
    r = wilcoxon_signed_rank(x, 0.0)
    assert r.extra["method"] == "normal"
    assert r.p_raw == pytest.approx(ref.pvalue, rel=1e-9)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(-1024, 1024), min_size=3, max_size=16), st.integers(-40, 40))
def test_wilcoxon_shift_invariant(x, c):
    # dyadic values keep every shift exact, so ties survive the shift
    x = np.array(x) / 1024.0
    c = c / 8.0
    a = wilcoxon_signed_rank(x, 0.25)
    b = wilcoxon_signed_rank(x + c, 0.25 + c)
    assert b.extra["n"] == a.extra["n"]
    assert b.p_raw == a.p_raw


def test_bonferroni_values():
    assert bonferroni(0.001, 14) == pytest.approx(0.014)
    assert bonferroni(0.5, 14) == 1.0
    with pytest.raises(ValueError):
        bonferroni(1.2, 3)
    with pytest.raises(ValueError):
        bonferroni(0.1, 0)


def test_bh_hand_values():
    np.testing.assert_allclose(bh_fdr([0.01, 0.02, 0.03]), [0.03, 0.03, 0.03])
    np.testing.assert_allclose(bh_fdr([0.04, 0.01]), [0.04, 0.02])
    with pytest.raises(ValueError):
        bh_fdr([-0.1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_bh_monotone_and_not_below_raw(p):
    p = np.array(p)
    adj = bh_fdr(p)
    assert np.all(adj >= p - 1e-15)
    assert np.all(adj <= 1.0)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(adj[order]) >= -1e-15)
    ref = sps.false_discovery_control(p, method="bh")
    np.testing.assert_allclose(adj, ref, atol=1e-12)


def test_report_correction_invariants():
    reps = [StatReport("wilcoxon", 1.0, p) for p in (0.01, 0.2, 0.04)]
    bon = apply_correction(reps, "bonferroni")
    assert [r.m for r in bon] == [3, 3, 3]
    assert bon[0].p_corrected == pytest.approx(0.03)
    for r in apply_correction(reps, "bh_fdr"):
        assert r.p_raw <= r.p_corrected <= 1
    with pytest.raises(ValueError):
        StatReport("x", 0.0, 0.5, p_corrected=0.1)


def test_friedman_perfect_consistency():
    n, k = 16, 14
    M = np.tile(np.arange(k, dtype=float), (n, 1))
    r = friedman(M)
    assert r.statistic == pytest.approx(n * (k - 1))
    assert r.statistic == pytest.approx(208.0)


def test_friedman_constant_rows():
    assert friedman(np.ones((5, 4))).statistic == 0.0
    assert friedman(np.ones((5, 4))).p_raw == 1.0


def test_friedman_matches_library_without_ties():
    rng = np.random.default_rng(3)
    M = rng.normal(size=(16, 6))
    ref = sps.friedmanchisquare(*M.T)
    r = friedman(M)
    assert r.statistic == pytest.approx(ref.statistic, rel=1e-12)
    assert r.p_raw == pytest.approx(ref.pvalue, rel=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 10), st.integers(0, 10000))
def test_friedman_two_models_sign_count(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.permuted(np.tile([0.0, 1.0], (n, 1)), axis=1)
    # enumerate: with k = 2 the statistic is (2S - n)^2 / n, S = wins of model 2
    S = int((M[:, 1] > M[:, 0]).sum())
    assert friedman(M).statistic == pytest.approx((2 * S - n) ** 2 / n)


def _folds(rng, n_folds=4, n=40, K=5, signal=0.0):
    out = []
    for _ in range(n_folds):
        y = np.arange(n) % K
        pred = np.where(rng.random(n) < signal, y, rng.integers(0, K, n))
        out.append((y, pred))
    return out


def test_permutation_observed_above_all():
    rng = np.random.default_rng(0)
    folds = _folds(rng, signal=1.0)
    r = permutation_test(folds, n_perm=10000, seed=42)
    assert r.statistic == 1.0
    assert r.p_raw == pytest.approx(1 / 10001)
    assert r.p_raw < 0.001


def test_permutation_single_tied_draw():
    y = np.zeros(6, int)
    y[3:] = 1
    pred = np.zeros(6, int)
    r = permutation_test([(y, pred)], n_perm=1, seed=1)
    assert r.p_raw == 1.0


def test_permutation_deterministic_and_seed_dependent():
    rng = np.random.default_rng(1)
    folds = _folds(rng)
    a = permutation_test(folds, n_perm=200, seed=3)
    b = permutation_test(folds, n_perm=200, seed=3)
    assert a.p_raw == b.p_raw


def test_permutation_null_p_roughly_uniform():
    rng = np.random.default_rng(2)
    ps = [permutation_test(_folds(rng, n_folds=2, n=30), n_perm=99, seed=s).p_raw for s in range(60)]
    assert sps.kstest(ps, "uniform").pvalue > 0.001


def brute_spearman(x, y):
    rx, ry = sps.rankdata(x), sps.rankdata(y)
    rho = np.corrcoef(rx, ry)[0, 1]
    null = [np.corrcoef(rx, ry[list(p)])[0, 1] for p in itertools.permutations(range(len(x)))]
    return rho, np.mean(np.abs(null) >= abs(rho) - 1e-12)


def test_spearman_extremes():
    x = np.arange(6.0)
    assert spearman(x, x ** 3).statistic == pytest.approx(1.0)
    assert spearman(x, -x).statistic == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        spearman(x, np.ones(6))


def test_spearman_n5_exact():
    x = [1.0, 2.5, 0.3, 4.0, 2.0]
    y = [0.2, 0.1, 0.5, 0.9, 0.4]
    rho, p = brute_spearman(x, y)
    r = spearman(x, y)
    assert r.statistic == pytest.approx(rho)
    assert r.p_raw == pytest.approx(p, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 7), st.integers(0, 10 ** 6))
def test_spearman_exact_matches_enumeration(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 4, n).astype(float)
    y = rng.normal(size=n)
    assume(np.ptp(x) > 0)
    rho, p = brute_spearman(x, y)
    r = spearman(x, y)
    assert r.statistic == pytest.approx(rho, abs=1e-12)
    assert r.p_raw == pytest.approx(p, abs=1e-12)


def test_spearman_ten_pairs_monte_carlo_close_to_library():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=10), rng.normal(size=10)
    r = spearman(x, y, n_perm=10000, seed=42)
    assert r.extra["method"] == "monte_carlo"
    ref = sps.spearmanr(x, y)
    assert r.statistic == pytest.approx(ref.statistic)
    assert abs(r.p_raw - ref.pvalue) < 0.05


def test_anova_hand_computed():
    g = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [2.0, 2.0, 5.0]]
    # means 2, 5, 3; grand 10/3
    ss_b = 3 * ((2 - 10 / 3) ** 2 + (5 - 10 / 3) ** 2 + (3 - 10 / 3) ** 2)
    ss_w = 2 + 2 + 6
    F = (ss_b / 2) / (ss_w / 6)
    r = anova_oneway(g)
    assert r.statistic == pytest.approx(F, abs=1e-9)
    assert r.extra["eta2_partial"] == pytest.approx(ss_b / (ss_b + ss_w), abs=1e-12)
    assert r.p_raw == pytest.approx(sps.f_oneway(*g).pvalue, rel=1e-9)


def test_anova_identical_groups_and_errors():
    assert anova_oneway([[1, 2, 3], [1, 2, 3]]).statistic == 0.0
    with pytest.raises(ValueError):
        anova_oneway([[0, 0], [1, 1]])
    with pytest.raises(ValueError):
        anova_oneway([[1, 2, 3]])


def test_stats_csv(tmp_path):
    reps = apply_correction([StatReport("wilcoxon", 3.0, 0.01), StatReport("wilcoxon", 9.0, 0.3)], "bonferroni")
    path = tmp_path / "stats.csv"
    write_stats_csv(reps, path, header_line="# config=abc", labels=["gbdt", "rf"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# config=abc"
    assert lines[1] == "test,statistic,p_raw,p_corrected,correction,m"
    assert lines[2].startswith("wilcoxon:gbdt,3,0.01,0.02,bonferroni,2")
