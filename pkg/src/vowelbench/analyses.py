"""Vowel-specific analyses built on the LOSO harness.

Pairwise and triplet discrimination, acoustic versus neural representational
similarity, electrode importance with channel dropout, and vertex ERP peaks.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Optional, Sequence

import numpy as np

from .classify import ClassifierSpec
from .epochs import VOWELS, EpochSet
from .features import FAMILIES, channel_groups
from .harness import FeaturePipeline, cohens_d, loso, write_csv
from .stats import StatReport, anova_oneway, bonferroni, spearman, wilcoxon_signed_rank

logger = logging.getLogger(__name__)

PAIRS = tuple("".join(p) for p in combinations(VOWELS, 2))
TRIPLETS = ("aei", "aiu", "iou")
FEATURES_PER_CHANNEL = 19
N1_WINDOW = (0.080, 0.150)
P2_WINDOW = (0.150, 0.280)
ERP_CHANNELS = ("Cz", "FCz")


# ---------------------------------------------------------------- pairwise

def subset_classes(epochs: EpochSet, vowels: str) -> EpochSet:
    """Trials of the given vowels, relabelled 0..len(vowels)-1 in the given order."""
    codes = [VOWELS.index(v) for v in vowels]
    present = set(np.unique(epochs.labels).tolist())
    missing = [v for v, c in zip(vowels, codes) if c not in present]
    if missing:
        raise ValueError(f"vowels {missing} have no trials")
    idx = np.flatnonzero(np.isin(epochs.labels, codes))
    sub = epochs.select(idx)
    lut = np.full(len(VOWELS), -1)
    lut[codes] = np.arange(len(codes))
    return sub.with_data(sub.data, labels=lut[sub.labels])


def pairwise_tasks(epochs: EpochSet, spec: ClassifierSpec, families: Sequence[str] = ("de",),
                   tasks: Optional[Sequence[str]] = None, seed: int = 42, n_jobs: int = 1) -> list:
    """LOSO accuracy for every vowel pair and the three triplets.

    Each row carries fold accuracies, Cohen's d against ``1/k`` and a one-sided
    Wilcoxon p-value, Bonferroni-corrected over the 10 pairs or the 3 triplets.
    """
    tasks = list(PAIRS + TRIPLETS) if tasks is None else list(tasks)
    if set(np.unique(epochs.labels).tolist()) != set(range(len(VOWELS))):
        raise ValueError("all five vowel classes must be present")
    rows = []
    for task in tasks:
        sub = subset_classes(epochs, task)
        k = len(task)
        res = loso(sub, FeaturePipeline(spec, families, name=task), seed=seed, n_jobs=n_jobs, n_classes=k)
        acc = res.accuracies(task)
        chance = 1.0 / k
        rep = wilcoxon_signed_rank(acc, mu0=chance)
        m = len(PAIRS) if k == 2 else len(TRIPLETS)
        rows.append({"pair": task, "chance": chance, "acc_mean": float(acc.mean()),
                     "acc_sd": float(acc.std(ddof=1)) if acc.size > 1 else 0.0,
                     "d": cohens_d(acc, chance) if acc.size > 1 else float("nan"),
                     "p_raw": rep.p_raw, "p_bonf": bonferroni(rep.p_raw, m), "folds": acc})
    return rows


PAIRWISE_COLUMNS = ("pair", "chance", "acc_mean", "acc_sd", "d", "p_raw", "p_bonf")


def write_pairwise(rows, path, header: Optional[str] = None):
    write_csv(path, PAIRWISE_COLUMNS, [[r[c] for c in PAIRWISE_COLUMNS] for r in rows], header)


# ---------------------------------------------------------------- acoustics and RSA

def bark(f):
    """Hz to Bark, ``26.81 f / (1960 + f) - 0.53``."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f <= 0) or not np.all(np.isfinite(f)):
        raise ValueError("frequencies must be positive and finite")
    return 26.81 * f / (1960.0 + f) - 0.53


@dataclass(frozen=True)
class FormantTable:
    """F1 and F2 in Hz per vowel; read from config, never built in."""

    f1: Mapping[str, float]
    f2: Mapping[str, float]

    def __post_init__(self):
        for name, table in (("F1", self.f1), ("F2", self.f2)):
            missing = [v for v in VOWELS if v not in table]
            if missing:
                raise ValueError(f"{name} missing vowels {missing}")
            if any(not np.isfinite(table[v]) or table[v] <= 0 for v in VOWELS):
                raise ValueError(f"{name} values must be positive")

    @classmethod
    def from_mapping(cls, m: Mapping) -> "FormantTable":
        """Accepts ``{vowel: {"F1": ., "F2": .}}`` or ``{"F1": {...}, "F2": {...}}``."""
        if "F1" in m and "F2" in m:
            return cls(dict(m["F1"]), dict(m["F2"]))
        return cls({v: float(m[v]["F1"]) for v in m}, {v: float(m[v]["F2"]) for v in m})


def acoustic_distances(table: FormantTable) -> np.ndarray:
    """5 x 5 Euclidean distances in (Bark(F1), Bark(F2))."""
    z = np.stack([bark([table.f1[v] for v in VOWELS]), bark([table.f2[v] for v in VOWELS])], axis=1)
    D = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=-1))
    return (D + D.T) / 2


def condensed(D: np.ndarray) -> np.ndarray:
    """Upper triangle in pair order ae, ai, ao, au, ei, ..."""
    D = np.asarray(D, dtype=np.float64)
    if D.shape != (len(VOWELS), len(VOWELS)):
        raise ValueError("expected a 5 x 5 matrix")
    i, j = np.triu_indices(len(VOWELS), 1)
    return D[i, j]


def rsa(acoustic, pair_accuracy, n_perm: int = 10000, seed: int = 42) -> StatReport:
    """Spearman correlation of acoustic distance with neural confusion (1 - accuracy).

    ``acoustic`` is a 5 x 5 matrix or a condensed 10-vector; ``pair_accuracy``
    a mapping ``pair -> accuracy`` or a 10-vector in pair order.
    """
    a = np.asarray(acoustic, dtype=np.float64)
    a = condensed(a) if a.ndim == 2 else a
    if isinstance(pair_accuracy, Mapping):
        acc = np.array([pair_accuracy[p] for p in PAIRS], dtype=np.float64)
    else:
        acc = np.asarray(pair_accuracy, dtype=np.float64)
    if a.shape != (len(PAIRS),) or acc.shape != (len(PAIRS),):
        raise ValueError(f"need {len(PAIRS)} pairs in both inputs")
    confusion = 1.0 - acc
    rep = spearman(a, confusion, n_perm=n_perm, seed=seed)
    return StatReport("rsa_spearman", rep.statistic, rep.p_raw, extra=dict(rep.extra))


def write_rsa(report: StatReport, acoustic, pair_accuracy, path, header: Optional[str] = None):
    a = np.asarray(acoustic, dtype=np.float64)
    a = condensed(a) if a.ndim == 2 else a
    acc = [pair_accuracy[p] for p in PAIRS] if isinstance(pair_accuracy, Mapping) else list(pair_accuracy)
    rows = [[p, a[i], 1.0 - acc[i]] for i, p in enumerate(PAIRS)]
    rows.append(["rho", report.statistic, report.p_raw])
    write_csv(path, ("pair", "acoustic_distance", "neural_confusion"), rows, header)


# ---------------------------------------------------------------- electrode importance

def electrode_importance(importances: Sequence[np.ndarray], registry) -> dict:
    """Per-channel share of feature importance, averaged over folds.

    Every column must belong to a hand-crafted family with a channel.  Shares
    sum to one.
    """
    imp = np.atleast_2d(np.asarray(importances, dtype=np.float64))
    if imp.shape[1] != len(registry):
        raise ValueError("importance length does not match the registry")
    unmapped = [str(c) for c in registry if c.family not in FAMILIES or not c.channel or c.channel == "*"]
    if unmapped:
        raise ValueError(f"columns without a channel: {unmapped[:5]}")
    if np.any(imp < 0):
        raise ValueError("importances must be non-negative")
    mean = imp.mean(axis=0)
    groups = channel_groups(registry)
    sums = {ch: float(mean[idx].sum()) for ch, idx in groups.items()}
    total = sum(sums.values())
    if total <= 0:
        return {ch: 1.0 / len(sums) for ch in sums}
    return {ch: v / total for ch, v in sums.items()}


def loso_importance(epochs: EpochSet, spec: ClassifierSpec, families: Sequence[str] = FAMILIES,
                    seed: int = 42, n_jobs: int = 1):
    """Run LOSO keeping each fold's feature importances; returns ``(shares, result)``."""
    pipe = FeaturePipeline(spec, families, keep_importance=True, name=spec.kind)
    res = loso(epochs, pipe, seed=seed, n_jobs=n_jobs)
    folds = res.folds[spec.kind]
    shares = electrode_importance([f.extra["importance"] for f in folds], folds[0].extra["registry"])
    return shares, res


def ranking(shares: Mapping[str, float]) -> list:
    """Channels by decreasing share (name breaks ties)."""
    return [ch for ch, _ in sorted(shares.items(), key=lambda kv: (-kv[1], kv[0]))]


def write_importance(shares: Mapping[str, float], path, header: Optional[str] = None):
    write_csv(path, ("channel", "share"), [[ch, shares[ch]] for ch in ranking(shares)], header)


def zero_channels(epochs: EpochSet, names: Sequence[str]) -> EpochSet:
    data = epochs.data.copy()
    data[:, [epochs.channel_index(n) for n in names]] = 0.0
    return epochs.with_data(data)


def channel_dropout(epochs: EpochSet, order: Sequence[str], Ks: Sequence[int], spec: ClassifierSpec,
                    families: Sequence[str] = ("de",), directions=("top", "bottom"),
                    seed: int = 42, n_jobs: int = 1) -> list:
    """LOSO accuracy after zeroing the K most (``top``) or least (``bottom``)
    important channels before feature extraction.

    ``order`` ranks channels from most to least important.
    """
    order = list(order)
    if sorted(order) != sorted(epochs.channel_names):
        raise ValueError("ranking must list every channel exactly once")
    for K in Ks:
        if not 0 <= K < epochs.n_channels:
            raise ValueError(f"K={K} must lie in [0, {epochs.n_channels})")
    rows = []
    cache = {}
    for direction in directions:
        if direction not in ("top", "bottom"):
            raise ValueError("direction must be 'top' or 'bottom'")
        for K in Ks:
            drop = tuple(sorted(order[:K] if direction == "top" else order[len(order) - K:]))
            if drop not in cache:
                data = zero_channels(epochs, drop) if drop else epochs
                res = loso(data, FeaturePipeline(spec, families, name=spec.kind), seed=seed, n_jobs=n_jobs)
                cache[drop] = res.accuracies(spec.kind)
            acc = cache[drop]
            rows.append({"direction": direction, "k": K, "mean": float(acc.mean()),
                         "sd": float(acc.std(ddof=1)) if acc.size > 1 else 0.0, "dropped": list(drop)})
    return rows


# ---------------------------------------------------------------- ERP

def _window(times, window):
    lo, hi = window
    if lo < times[0] - 1e-9 or hi > times[-1] + 1e-9 or hi <= lo:
        raise ValueError(f"window {window} outside the epoch [{times[0]:.3f}, {times[-1]:.3f}]")
    return (times >= lo - 1e-9) & (times <= hi + 1e-9)


def erp(epochs: EpochSet, channels: Sequence[str] = ERP_CHANNELS, n1=N1_WINDOW, p2=P2_WINDOW) -> dict:
    """Vertex ERP peaks per vowel.

    The channel-averaged waveform is averaged over trials within each subject,
    then over subjects.  N1 is the window minimum and P2 the window maximum of
    the grand average.  One-way ANOVAs across vowels use each subject's own
    peak in the same window.

    Returns ``{"rows": [...], "anova": {"N1": StatReport, "P2": StatReport},
    "grand": vowels x samples}``.
    """
    missing = [c for c in channels if c not in epochs.channel_names]
    if missing:
        raise ValueError(f"channels {missing} not in the montage")
    times = epochs.times
    masks = {"N1": _window(times, n1), "P2": _window(times, p2)}
    pick = {"N1": np.argmin, "P2": np.argmax}
    wave = epochs.data[:, [epochs.channel_index(c) for c in channels]].mean(axis=1)
    vowels = [int(v) for v in np.unique(epochs.labels)]
    subjects = epochs.subject_ids()
    per_subject = np.full((len(vowels), len(subjects), times.size), np.nan)
    for a, v in enumerate(vowels):
        for b, s in enumerate(subjects):
            sel = (epochs.labels == v) & (epochs.subjects == s)
            if sel.any():
                per_subject[a, b] = wave[sel].mean(axis=0)
    grand = np.nanmean(per_subject, axis=1)
    rows, groups = [], {"N1": [], "P2": []}
    for a, v in enumerate(vowels):
        for comp, mask in masks.items():
            idx = np.flatnonzero(mask)
            j = idx[pick[comp](grand[a, idx])]
            rows.append({"vowel": VOWELS[v], "component": comp, "peak_uv": float(grand[a, j]),
                         "latency_ms": float(times[j] * 1000.0)})
            subj = per_subject[a][:, idx]
            subj = subj[~np.isnan(subj).any(axis=1)]
            groups[comp].append(subj.min(axis=1) if comp == "N1" else subj.max(axis=1))
    anova = {comp: anova_oneway(g) for comp, g in groups.items()}
    return {"rows": rows, "anova": anova, "grand": grand, "times": times}


def write_erp(result: dict, path, header: Optional[str] = None):
    """``erp.csv`` peak table; the ANOVAs go to the stats table."""
    cols = ("vowel", "component", "peak_uv", "latency_ms")
    write_csv(path, cols, [[r[c] for c in cols] for r in result["rows"]], header)
