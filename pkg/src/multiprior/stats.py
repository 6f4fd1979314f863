"""Paired and unpaired rank tests, paired TOST and Bonferroni decisions.

Exact null distributions are built by dynamic programming over doubled
(integer) tie-averaged ranks, so ties are handled exactly. The t and normal
tail probabilities come from scipy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

EXACT_SIGNED_RANK_MAX_N = 25
EXACT_RANK_SUM_MAX_MIN_N = 8


class DegenerateTestError(ValueError):
    pass


@dataclass
class TestResult:
    statistic: float
    p_value: float
    n: int
    test: str
    method: str = ""
    alpha: float | None = None

    __test__ = False  # not a pytest class

    def __post_init__(self):
        self.p_value = float(min(1.0, max(0.0, self.p_value)))


def _two_sided(dist, obs):
    """Two-sided p from a probability vector over integer statistic values."""
    lower = dist[: obs + 1].sum()
    upper = dist[obs:].sum()
    return min(1.0, 2.0 * min(lower, upper))


def _signed_rank_null(ranks2):
    """P(W2 = s) for W2 = sum of doubled ranks carrying a positive sign."""
    total = int(ranks2.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: total + 1 - r]
        dist = 0.5 * (dist + shifted)
    return dist


def wilcoxon_paired(a, b) -> TestResult:
    """Wilcoxon signed-rank test on ``a - b`` (zero differences dropped)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D with equal lengths")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise DegenerateTestError("no nonzero differences")
    if n < 5:
        raise DegenerateTestError(f"need at least 5 nonzero differences, got {n}")
    ranks = sps.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_SIGNED_RANK_MAX_N:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        p = _two_sided(_signed_rank_null(ranks2), int(round(2 * w_plus)))
        return TestResult(w_plus, p, n, "wilcoxon_signed_rank", "exact")
    _, counts = np.unique(np.abs(d), return_counts=True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(counts**3 - counts) / 48.0
    z = (abs(w_plus - mean) - 0.5) / np.sqrt(var)
    return TestResult(w_plus, 2 * sps.norm.sf(max(z, 0.0)), n, "wilcoxon_signed_rank", "normal")


def _rank_sum_null(ranks2, k):
    """P(sum of a random k-subset of doubled ranks = s)."""
    total = int(np.sort(ranks2)[-k:].sum()) if k else 0
    dp = np.zeros((k + 1, total + 1))
    dp[0, 0] = 1.0
    for r in ranks2:
        r = int(r)
        for j in range(k, 0, -1):
            dp[j, r:] += dp[j - 1, : total + 1 - r]
    return dp[k] / dp[k].sum()


def mann_whitney_u(a, b) -> TestResult:
    """Mann-Whitney U for sample ``a`` against ``b``, two-sided."""
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise DegenerateTestError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    ranks = sps.rankdata(pooled)
    r1 = ranks[:n1].sum()
    u = float(r1 - n1 * (n1 + 1) / 2.0)
    n = n1 + n2
    if min(n1, n2) <= EXACT_RANK_SUM_MAX_MIN_N:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        small_first = n1 <= n2
        k = n1 if small_first else n2
        obs = int(round(2 * (r1 if small_first else ranks[n1:].sum())))
        p = _two_sided(_rank_sum_null(ranks2, k), obs)
        return TestResult(u, p, n, "mann_whitney_u", "exact")
    _, counts = np.unique(pooled, return_counts=True)
    var = n1 * n2 / 12.0 * ((n + 1) - np.sum(counts**3 - counts) / (n * (n - 1)))
    if var <= 0:
        return TestResult(u, 1.0, n, "mann_whitney_u", "normal")
    z = (abs(u - n1 * n2 / 2.0) - 0.5) / np.sqrt(var)
    return TestResult(u, 2 * sps.norm.sf(max(z, 0.0)), n, "mann_whitney_u", "normal")


def wilcoxon_rank_sum(a, b) -> TestResult:
    """Unpaired rank-sum form (same null as Mann-Whitney); statistic is ``a``'s rank sum."""
    res = mann_whitney_u(a, b)
    n1 = np.asarray(a).size
    return TestResult(res.statistic + n1 * (n1 + 1) / 2.0, res.p_value, res.n,
                      "wilcoxon_rank_sum", res.method)


@dataclass
class TostResult:
    lower: TestResult
    upper: TestResult
    margin: float
    alpha: float

    @property
    def equivalent(self):
        return self.lower.p_value < self.alpha and self.upper.p_value < self.alpha


def tost_paired(a, b, margin, alpha=0.05) -> TostResult:
    """Two one-sided paired t-tests of the mean difference against ``+-margin``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D with equal lengths")
    if a.size < 3:
        raise DegenerateTestError("TOST needs at least 3 pairs")
    if not margin > 0:
        raise ValueError("margin must be positive")
    d = a - b
    n = d.size
    mean = d.mean()
    sd = d.std(ddof=1)
    df = n - 1
    if sd == 0:
        # limit s -> 0: each one-sided statistic is +-infinity unless mean sits on the bound
        if abs(abs(mean) - margin) == 0:
            raise DegenerateTestError("zero variance with the mean exactly on a bound")
        t_lo = np.inf if mean > -margin else -np.inf
        t_hi = -np.inf if mean < margin else np.inf
    else:
        se = sd / np.sqrt(n)
        t_lo = (mean + margin) / se
        t_hi = (mean - margin) / se
    lower = TestResult(t_lo, sps.t.sf(t_lo, df), n, "tost_lower", "t", alpha)
    upper = TestResult(t_hi, sps.t.cdf(t_hi, df), n, "tost_upper", "t", alpha)
    return TostResult(lower, upper, margin, alpha)


@dataclass
class BonferroniResult:
    threshold: float
    reject: list
    p_values: list


def bonferroni(p_values, alpha=0.05) -> BonferroniResult:
    """Reject hypothesis ``i`` iff ``p_i < alpha / m`` (strict)."""
    p = [float(v) for v in p_values]
    if not p:
        raise ValueError("need at least one p-value")
    thr = alpha / len(p)
    return BonferroniResult(thr, [v < thr for v in p], p)
