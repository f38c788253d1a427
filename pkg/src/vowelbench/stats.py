"""Significance tests and multiple-comparison corrections.

Wilcoxon signed-rank (exact up to n = 20), Bonferroni and Benjamini-Hochberg
adjustment, the Friedman rank test, a label-permutation test on frozen fold
predictions, Spearman correlation and one-way ANOVA.  Every test returns a
:class:`StatReport`.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from itertools import permutations
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats as sps

logger = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 20
EXACT_SPEARMAN_MAX_N = 8
ALTERNATIVES = ("one_sided_greater", "two_sided")
CORRECTIONS = ("none", "bonferroni", "bh_fdr")


@dataclass(frozen=True)
class StatReport:
    test: str
    statistic: float
    p_raw: float
    p_corrected: Optional[float] = None
    correction: str = "none"
    m: int = 1
    alternative: str = "two_sided"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.p_raw <= 1.0:
            raise ValueError(f"p value {self.p_raw} outside [0, 1]")
        if self.correction not in CORRECTIONS:
            raise ValueError(f"unknown correction {self.correction!r}")
        if self.p_corrected is None:
            object.__setattr__(self, "p_corrected", self.p_raw)
        if not self.p_raw <= self.p_corrected <= 1.0:
            raise ValueError("corrected p must lie in [p_raw, 1]")

    def bonferroni(self, m: int) -> "StatReport":
        return replace(self, p_corrected=bonferroni(self.p_raw, m), correction="bonferroni", m=int(m))

    def as_row(self) -> dict:
        return {"test": self.test, "statistic": self.statistic, "p_raw": self.p_raw,
                "p_corrected": self.p_corrected, "correction": self.correction, "m": self.m}


def _check_p(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p values must lie in [0, 1]")
    return p


def _check_alt(alternative):
    if alternative not in ALTERNATIVES:
        raise ValueError(f"alternative must be one of {ALTERNATIVES}")


# ---------------------------------------------------------------- corrections

def bonferroni(p_raw, m: int):
    """``min(1, m * p)``; accepts a scalar or an array."""
    if m < 1:
        raise ValueError("m must be >= 1")
    p = _check_p(p_raw)
    out = np.minimum(1.0, p * m)
    return float(out) if out.ndim == 0 else out


def bh_fdr(p_raw: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p values, in input order."""
    p = _check_p(p_raw).ravel()
    m = p.size
    if m == 0:
        return p
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    return out


def apply_correction(reports: Sequence[StatReport], method: str) -> list:
    """Correct a family of reports jointly (``m`` = family size)."""
    if method not in CORRECTIONS:
        raise ValueError(f"unknown correction {method!r}")
    m = len(reports)
    if method == "none" or m == 0:
        return list(reports)
    raw = [r.p_raw for r in reports]
    adj = bonferroni(np.array(raw), m) if method == "bonferroni" else bh_fdr(raw)
    return [replace(r, p_corrected=float(max(a, r.p_raw)), correction=method, m=m)
            for r, a in zip(reports, np.atleast_1d(adj))]


# ---------------------------------------------------------------- wilcoxon

def _signed_rank_null(ranks2: np.ndarray) -> np.ndarray:
    """Counts of every attainable sum of a random subset of ``ranks2``.

    ``ranks2`` are doubled (hence integer) ranks; index ``s`` of the result is
    the number of the ``2**n`` sign patterns whose negative ranks sum to ``s``.
    """
    total = int(ranks2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in ranks2.astype(int):
        counts[r:] = counts[r:] + counts[:total + 1 - r].copy()
    return counts


def wilcoxon_signed_rank(x, mu0: float = 0.0, alternative: str = "one_sided_greater",
                         zero_tol: float = 1e-12) -> StatReport:
    """Signed-rank test of ``x`` against ``mu0``.

    The statistic is ``W = sum of the ranks of negative differences``, so small
    ``W`` is evidence for ``x > mu0``.  Zero differences are dropped.  The
    null distribution is exact for ``n <= 20`` (ties handled through
    half-integer ranks) and normal with tie-corrected variance above.
    """
    _check_alt(alternative)
    d = np.asarray(x, dtype=np.float64) - mu0
    if d.ndim != 1 or d.size == 0:
        raise ValueError("need a non-empty 1-D sample")
    d = d[np.abs(d) > zero_tol]
    n = d.size
    if n == 0:
        logger.warning("all differences are zero; returning p = 1")
        return StatReport("wilcoxon", 0.0, 1.0, alternative=alternative, extra={"n": 0})
    ranks = sps.rankdata(np.abs(d))
    w = float(ranks[d < 0].sum())
    total = n * (n + 1) / 2.0
    if n <= EXACT_WILCOXON_MAX_N:
        r2 = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_null(r2)
        probs = counts / counts.sum()
        w2 = int(round(2 * w))
        lower = float(probs[:w2 + 1].sum())
        upper = float(probs[w2:].sum())
        method = "exact"
    else:
        _, tcounts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tcounts ** 3 - tcounts).sum() / 48.0
        z = (w - total / 2.0) / math.sqrt(var)
        lower = float(sps.norm.cdf(z))
        upper = float(sps.norm.sf(z))
        method = "normal"
    if alternative == "one_sided_greater":
        p = lower
    else:
        p = 2.0 * min(lower, upper)
    return StatReport("wilcoxon", w, float(min(1.0, max(0.0, p))), alternative=alternative,
                      extra={"n": n, "method": method, "w_plus": total - w})


# ---------------------------------------------------------------- friedman

def friedman(matrix) -> StatReport:
    """Friedman chi-square over a subjects x models table (no tie correction)."""
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 2 or M.shape[1] < 2:
        raise ValueError("need at least 2 subjects and 2 models")
    n, k = M.shape
    ranks = np.apply_along_axis(sps.rankdata, 1, M)
    rbar = ranks.mean(axis=0)
    chi2 = 12.0 * n / (k * (k + 1)) * float(((rbar - (k + 1) / 2.0) ** 2).sum())
    p = float(sps.chi2.sf(chi2, k - 1))
    return StatReport("friedman", chi2, min(1.0, p), extra={"n": n, "k": k, "mean_ranks": rbar.tolist()})


# ---------------------------------------------------------------- permutation

def _balanced_accuracy(y, pred, n_classes):
    counts = np.bincount(y, minlength=n_classes)
    hits = np.bincount(y[y == pred], minlength=n_classes)
    present = counts > 0
    return float((hits[present] / counts[present]).mean())


def draw_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream: draw ``index`` is reproducible on its own."""
    return np.random.default_rng([int(seed), int(index)])


def permutation_test(folds: Sequence, n_perm: int = 10000, seed: int = 42,
                     n_classes: Optional[int] = None) -> StatReport:
    """Permute true labels against frozen predictions within each fold.

    ``folds`` is a sequence of ``(y_true, y_pred)`` pairs.  The statistic is
    the mean per-fold balanced accuracy and
    ``p = (1 + #{perm >= observed}) / (1 + n_perm)``.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    folds = [(np.asarray(t, dtype=np.int64), np.asarray(p, dtype=np.int64)) for t, p in folds]
    if not folds:
        raise ValueError("no folds")
    K = n_classes or int(max(max(t.max(), p.max()) for t, p in folds)) + 1
    observed = float(np.mean([_balanced_accuracy(t, p, K) for t, p in folds]))
    # class counts per fold are permutation invariant; only the hits move
    sizes = [t.size for t, _ in folds]
    fold_id = np.repeat(np.arange(len(folds)), sizes)
    pred = np.concatenate([p for _, p in folds])
    counts = np.stack([np.bincount(t, minlength=K) for t, _ in folds]).astype(np.float64)
    present = counts > 0
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=present)
    weight = inv / present.sum(axis=1, keepdims=True) / len(folds)
    null = np.empty(n_perm)
    for i in range(n_perm):
        rng = draw_rng(seed, i)
        yt = np.concatenate([t[rng.permutation(t.size)] for t, _ in folds])
        hit = yt == pred
        null[i] = np.dot(np.bincount(fold_id[hit] * K + yt[hit], minlength=len(folds) * K), weight.ravel())
    # tolerance guards against float noise in equal-by-construction scores
    exceed = int(np.sum(null >= observed - 1e-12))
    p = (1.0 + exceed) / (1.0 + n_perm)
    return StatReport("permutation", observed, p, alternative="one_sided_greater",
                      extra={"n_perm": n_perm, "null_mean": float(null.mean()), "seed": seed})


def permutation_null(score: Callable[[np.random.Generator], float], observed: float,
                     n_perm: int = 1000, seed: int = 42) -> StatReport:
    """Generic permutation p value; ``score(rng)`` evaluates one permuted
    replicate (for example a full re-training run on shuffled labels)."""
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    null = np.array([score(draw_rng(seed, i)) for i in range(n_perm)])
    exceed = int(np.sum(null >= observed - 1e-12))
    return StatReport("permutation_refit", float(observed), (1.0 + exceed) / (1.0 + n_perm),
                      alternative="one_sided_greater", extra={"n_perm": n_perm, "seed": seed})


# ---------------------------------------------------------------- spearman

def _pearson(a, b):
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean()
    return (a @ b) / np.sqrt((a * a).sum(axis=-1) * (b @ b))


def spearman(x, y, n_perm: int = 10000, seed: int = 42, alternative: str = "two_sided") -> StatReport:
    """Rank correlation; exact permutation p for n <= 8, seeded Monte-Carlo above."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 pairs")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("Spearman rho is undefined for constant input")
    rx = sps.rankdata(x)
    ry = sps.rankdata(y)
    rho = float(_pearson(rx, ry))
    if n <= EXACT_SPEARMAN_MAX_N:
        perms = np.array(list(permutations(range(n))))
        null = _pearson(ry[perms], rx)
        denom = len(perms)
        extra0 = 0
        method = "exact"
    else:
        rng = np.random.default_rng(seed)
        null = _pearson(np.stack([ry[rng.permutation(n)] for _ in range(n_perm)]), rx)
        denom = n_perm + 1
        extra0 = 1
        method = "monte_carlo"
    eps = 1e-12
    if alternative == "two_sided":
        hits = int(np.sum(np.abs(null) >= abs(rho) - eps))
    else:
        _check_alt(alternative)
        hits = int(np.sum(null >= rho - eps))
    p = (extra0 + hits) / denom
    return StatReport("spearman", rho, min(1.0, p), alternative=alternative,
                      extra={"n": n, "method": method})


# ---------------------------------------------------------------- anova

def anova_oneway(groups: Sequence) -> StatReport:
    """One-way ANOVA; ``extra['eta2_partial'] = SS_b / (SS_b + SS_w)``."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2 or any(g.size < 2 for g in groups):
        raise ValueError("need at least 2 groups with at least 2 values each")
    allv = np.concatenate(groups)
    grand = allv.mean()
    ss_b = float(sum(g.size * (g.mean() - grand) ** 2 for g in groups))
    ss_w = float(sum(((g - g.mean()) ** 2).sum() for g in groups))
    k, N = len(groups), allv.size
    if ss_w <= 0:
        raise ValueError("F is undefined: zero within-group variance")
    df_b, df_w = k - 1, N - k
    F = (ss_b / df_b) / (ss_w / df_w)
    p = float(sps.f.sf(F, df_b, df_w))
    return StatReport("anova", F, min(1.0, p),
                      extra={"df_between": df_b, "df_within": df_w, "ss_between": ss_b,
                             "ss_within": ss_w, "eta2_partial": ss_b / (ss_b + ss_w)})


# ---------------------------------------------------------------- output

STATS_COLUMNS = ("test", "statistic", "p_raw", "p_corrected", "correction", "m")


def write_stats_csv(reports: Sequence[StatReport], path, header_line: Optional[str] = None,
                    labels: Optional[Sequence[str]] = None) -> None:
    """``stats.csv``; ``labels`` optionally qualify each test name (e.g. the model)."""
    with open(path, "w", newline="") as fh:
        if header_line:
            fh.write(header_line.rstrip("\n") + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_COLUMNS)
        for i, r in enumerate(reports):
            row = r.as_row()
            name = row["test"] if labels is None else f"{row['test']}:{labels[i]}"
            w.writerow([name, f"{row['statistic']:.9g}", f"{row['p_raw']:.9g}",
                        f"{row['p_corrected']:.9g}", row["correction"], row["m"]])
