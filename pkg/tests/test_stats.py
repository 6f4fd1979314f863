import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from _oracles import rank_sum_enumeration, signed_rank_enumeration
from multiprior.stats import (DegenerateTestError, bonferroni, mann_whitney_u, tost_paired,
                              wilcoxon_paired, wilcoxon_rank_sum)


def test_signed_rank_examples():
    a = np.arange(1.0, 7.0)
    res = wilcoxon_paired(a + 1, a)
    assert res.p_value == pytest.approx(2 / 64, abs=1e-15) and res.method == "exact"
    with pytest.raises(DegenerateTestError, match="no nonzero differences"):
        wilcoxon_paired(a, a)
    sym = wilcoxon_paired([1, 2, 3, 4, 5, 6], [0, 3, 1, 6, 2, 9])  # differences +-1, +-2, +-3
    assert sym.p_value > 0.5
    with pytest.raises(DegenerateTestError):
        wilcoxon_paired([1, 2, 3], [0, 0, 0])


@settings(max_examples=60, deadline=None)
@given(st.integers(5, 8), st.integers(0, 2**32 - 1), st.booleans())
def test_signed_rank_matches_enumeration(n, seed, ties):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 4, n) if ties else rng.normal(size=n)
    b = rng.integers(0, 4, n) if ties else rng.normal(size=n)
    if np.count_nonzero(a != b) < 5:
        return
    res = wilcoxon_paired(a, b)
    obs, p = signed_rank_enumeration(a, b)
    assert res.statistic == obs
    assert res.p_value == pytest.approx(p, abs=1e-10)


def test_signed_rank_large_n_normal_approx(rng):
    a, b = rng.normal(size=40), rng.normal(0.3, 1, size=40)
    res = wilcoxon_paired(a, b)
    ref = sps.wilcoxon(a, b, correction=True, method="approx")
    assert res.method == "normal" and res.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_mann_whitney_examples():
    assert mann_whitney_u([1, 2], [3, 4]).statistic == 0
    same = mann_whitney_u([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert same.statistic == 4.5 and same.p_value == 1.0
    with pytest.raises(DegenerateTestError):
        mann_whitney_u([], [1.0])
    assert wilcoxon_rank_sum([1, 2], [3, 4]).statistic == 3


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1), st.booleans())
def test_mann_whitney_matches_enumeration(n1, n2, seed, ties):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 4, n1) if ties else rng.normal(size=n1)
    b = rng.integers(0, 4, n2) if ties else rng.normal(size=n2)
    res = mann_whitney_u(a, b)
    u, p = rank_sum_enumeration(a, b)
    assert res.statistic == pytest.approx(u)
    assert res.p_value == pytest.approx(p, abs=1e-10)


def test_mann_whitney_normal_matches_scipy(rng):
    a, b = rng.normal(size=15), rng.normal(0.5, 1, size=12)
    res = mann_whitney_u(a, b)
    ref = sps.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic")
    assert res.method == "normal" and res.p_value == pytest.approx(ref.pvalue, rel=1e-9)


def test_rank_tests_affine_invariant(rng):
    a, b = rng.normal(size=7), rng.normal(size=7)
    for fn in (wilcoxon_paired, mann_whitney_u):
        assert fn(a, b).p_value == pytest.approx(fn(3 * a + 2, 3 * b + 2).p_value, abs=1e-12)


def test_tost_examples(rng):
    z = np.full(10, 0.8)
    res = tost_paired(z, z, 0.05)
    assert res.lower.p_value < 1e-6 and res.upper.p_value < 1e-6 and res.equivalent
    d = rng.normal(size=12)
    d = d - d.mean() + 0.05
    at_bound = tost_paired(d, np.zeros(12), 0.05)
    assert at_bound.upper.p_value == pytest.approx(0.5, abs=1e-9)
    # independent t evaluation
    diff = rng.normal(0.01, 0.05, size=10)
    res = tost_paired(diff, np.zeros(10), 0.05)
    se = diff.std(ddof=1) / np.sqrt(10)
    assert res.lower.p_value == pytest.approx(sps.t.sf((diff.mean() + 0.05) / se, 9))
    assert res.upper.p_value == pytest.approx(sps.t.cdf((diff.mean() - 0.05) / se, 9))
    with pytest.raises(DegenerateTestError):
        tost_paired([1, 2], [1, 2], 0.1)
    with pytest.raises(ValueError):
        tost_paired(z, z, 0.0)


def test_tost_paper_scale_plausibility():
    rng = np.random.default_rng(4)
    diff = rng.normal(0, 0.015, size=10)
    res = tost_paired(diff, np.zeros(10), 0.05)
    assert res.equivalent
    assert 1e-6 < max(res.lower.p_value, res.upper.p_value) < 1e-2


def test_bonferroni():
    res = bonferroni([0.001] + [0.5] * 27)
    assert res.threshold == pytest.approx(0.05 / 28)
    assert res.reject[0] and not any(res.reject[1:])
    assert bonferroni([0.04]).threshold == 0.05
    assert bonferroni([0.01, 0.02, 0.05 / 3]).reject == [True, False, False]
    with pytest.raises(ValueError):
        bonferroni([])
