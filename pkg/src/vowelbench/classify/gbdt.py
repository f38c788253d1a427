"""Histogram gradient-boosted trees with a multiclass softmax objective.

Trees are grown leaf-wise (best gain first) on features quantised to at most
255 bins, with the usual second-order leaf values ``-G / (H + lambda)``.
The defaults mirror common LightGBM settings (31 leaves, learning rate 0.05,
20 samples per leaf); bit-level parity with any library is not a goal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

__all__ = ["BinMapper", "GradientBoostedTrees"]


class BinMapper:
    """Per-feature quantile thresholds; bin ``b`` holds values ``<= thresholds[b]``."""

    def __init__(self, max_bins: int = 255):
        if not 2 <= max_bins <= 256:
            raise ValueError("max_bins must lie in [2, 256]")
        self.max_bins = max_bins
        self.thresholds = None

    def fit(self, X: np.ndarray) -> "BinMapper":
        self.thresholds = []
        for col in np.asarray(X, dtype=np.float64).T:
            uniq = np.unique(col)
            if len(uniq) <= self.max_bins:
                thr = (uniq[:-1] + uniq[1:]) / 2
            else:
                qs = np.quantile(col, np.linspace(0, 1, self.max_bins + 1)[1:-1], method="midpoint")
                thr = np.unique(qs)
            self.thresholds.append(thr)
        return self

    @property
    def n_bins(self) -> np.ndarray:
        return np.array([len(t) + 1 for t in self.thresholds], dtype=np.int64)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(X.shape, dtype=np.uint8)
        for j, thr in enumerate(self.thresholds):
            out[:, j] = np.searchsorted(thr, X[:, j], side="left")
        return out


@njit(cache=True)
def _fill_histogram(hist, binned_t, rows, g, h, n_bins):
    # column-major pass keeps one feature's histogram hot in cache
    n_features = binned_t.shape[0]
    m = len(rows)
    gs = np.empty(m)
    hs = np.empty(m)
    for i in range(m):
        gs[i] = g[rows[i]]
        hs[i] = h[rows[i]]
    for f in range(n_features):
        hf = hist[f]
        for b in range(n_bins[f]):
            hf[b, 0] = 0.0
            hf[b, 1] = 0.0
            hf[b, 2] = 0.0
        col = binned_t[f]
        for i in range(m):
            b = col[rows[i]]
            hf[b, 0] += gs[i]
            hf[b, 1] += hs[i]
            hf[b, 2] += 1.0


@njit(cache=True)
def _subtract(parent, child, n_bins):
    for f in range(parent.shape[0]):
        for b in range(n_bins[f]):
            parent[f, b, 0] -= child[f, b, 0]
            parent[f, b, 1] -= child[f, b, 1]
            parent[f, b, 2] -= child[f, b, 2]


@njit(cache=True)
def _best_split(hist, n_bins, min_child, min_hess, lam):
    n_features = hist.shape[0]
    best_gain = -np.inf
    best_f = -1
    best_b = -1
    G = 0.0
    H = 0.0
    N = 0.0
    for b in range(n_bins[0]):
        G += hist[0, b, 0]
        H += hist[0, b, 1]
        N += hist[0, b, 2]
    if N < 2.0 * min_child or H < 2.0 * min_hess:
        # neither child could meet the leaf minimums
        return best_gain, best_f, best_b, G, H
    parent = G * G / (H + lam)
    for f in range(n_features):
        gl = 0.0
        hl = 0.0
        nl = 0.0
        for b in range(n_bins[f] - 1):
            c = hist[f, b, 2]
            if c == 0.0:
                # empty bin: same partition as the previous threshold
                continue
            gl += hist[f, b, 0]
            hl += hist[f, b, 1]
            nl += c
            nr = N - nl
            if nl < min_child:
                continue
            if nr < min_child:
                break
            hr = H - hl
            if hl < min_hess or hr < min_hess:
                continue
            gr = G - gl
            gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_b = b
    return best_gain, best_f, best_b, G, H


@njit(cache=True)
def _grow(binned_t, g, h, rows, n_bins, pool, num_leaves, max_depth, min_child, min_hess, lam, min_gain):
    """Leaf-wise growth.  ``pool`` holds one histogram slot per live leaf; the
    larger child of a split reuses its parent's slot via subtraction.
    Returns node arrays, per-row raw leaf values and per-feature gain."""
    n_features = binned_t.shape[0]
    max_nodes = 2 * num_leaves - 1
    feat = np.full(max_nodes, -1, dtype=np.int64)
    thr = np.zeros(max_nodes, dtype=np.int64)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros(max_nodes)
    depth = np.zeros(max_nodes, dtype=np.int64)
    start = np.zeros(max_nodes, dtype=np.int64)
    stop = np.zeros(max_nodes, dtype=np.int64)
    slot = np.full(max_nodes, -1, dtype=np.int64)
    cand_gain = np.full(max_nodes, -np.inf)
    cand_f = np.full(max_nodes, -1, dtype=np.int64)
    cand_b = np.full(max_nodes, -1, dtype=np.int64)
    importance = np.zeros(n_features)

    buf = rows.copy()
    tmp = np.empty_like(buf)
    start[0] = 0
    stop[0] = len(buf)
    slot[0] = 0
    _fill_histogram(pool[0], binned_t, buf, g, h, n_bins)
    gain, f, b, G, H = _best_split(pool[0], n_bins, min_child, min_hess, lam)
    value[0] = -G / (H + lam)
    if max_depth <= 0 or depth[0] < max_depth:
        cand_gain[0] = gain
        cand_f[0] = f
        cand_b[0] = b
    n_nodes = 1
    n_leaves = 1
    while n_leaves < num_leaves:
        best = -1
        best_gain = min_gain
        for node in range(n_nodes):
            if feat[node] < 0 and cand_f[node] >= 0 and cand_gain[node] > best_gain:
                best_gain = cand_gain[node]
                best = node
        if best < 0:
            break
        f = cand_f[best]
        b = cand_b[best]
        s0 = start[best]
        s1 = stop[best]
        # stable partition of the node's rows
        nl = 0
        for i in range(s0, s1):
            if binned_t[f, buf[i]] <= b:
                tmp[s0 + nl] = buf[i]
                nl += 1
        nr = nl
        for i in range(s0, s1):
            if binned_t[f, buf[i]] > b:
                tmp[s0 + nr] = buf[i]
                nr += 1
        for i in range(s0, s1):
            buf[i] = tmp[i]
        feat[best] = f
        thr[best] = b
        importance[f] += cand_gain[best]
        lc = n_nodes
        rc = n_nodes + 1
        start[lc] = s0
        stop[lc] = s0 + nl
        start[rc] = s0 + nl
        stop[rc] = s1
        depth[lc] = depth[best] + 1
        depth[rc] = depth[best] + 1
        if nl <= s1 - s0 - nl:
            small, large = lc, rc
        else:
            small, large = rc, lc
        parent_slot = slot[best]
        slot[small] = n_leaves
        slot[large] = parent_slot
        _fill_histogram(pool[n_leaves], binned_t, buf[start[small]:stop[small]], g, h, n_bins)
        _subtract(pool[parent_slot], pool[n_leaves], n_bins)
        for child in (lc, rc):
            gain, cf, cb, G, H = _best_split(pool[slot[child]], n_bins, min_child, min_hess, lam)
            value[child] = -G / (H + lam)
            if max_depth <= 0 or depth[child] < max_depth:
                cand_gain[child] = gain
                cand_f[child] = cf
                cand_b[child] = cb
        left[best] = lc
        right[best] = rc
        n_nodes += 2
        n_leaves += 1

    row_value = np.zeros(binned_t.shape[1])
    for node in range(n_nodes):
        if feat[node] < 0:
            for i in range(start[node], stop[node]):
                row_value[buf[i]] = value[node]
    return feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes], row_value, importance


@njit(cache=True)
def _predict(binned, feat, thr, left, right, value, offsets, tree_class, n_classes, out):
    n = binned.shape[0]
    for t in range(len(offsets) - 1):
        base = offsets[t]
        k = tree_class[t]
        for i in range(n):
            node = 0
            while feat[base + node] >= 0:
                if binned[i, feat[base + node]] <= thr[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[i, k] += value[base + node]
    return out


def _softmax(F: np.ndarray) -> np.ndarray:
    z = F - F.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class GradientBoostedTrees:
    n_estimators: int = 500
    learning_rate: float = 0.05
    num_leaves: int = 31
    max_depth: int = -1
    min_child_samples: int = 20
    min_sum_hessian: float = 1e-3
    reg_lambda: float = 0.0
    min_gain: float = 0.0
    max_bins: int = 255
    seed: int = 42
    n_classes_: int = field(default=0, init=False)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "GradientBoostedTrees":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite feature values")
        K = int(y.max()) + 1
        if len(np.unique(y)) < 2:
            raise ValueError("training set holds a single class")
        self.n_classes_ = K
        self.mapper_ = BinMapper(self.max_bins).fit(X)
        binned = self.mapper_.transform(X)
        n_bins = self.mapper_.n_bins
        n, d = binned.shape
        binned_t = np.ascontiguousarray(binned.T)
        Y = np.eye(K)[y]
        prior = np.clip(Y.mean(axis=0), 1e-6, None)
        self.init_ = np.log(prior) - np.log(prior).mean()
        F = np.tile(self.init_, (n, 1))
        rows = np.arange(n, dtype=np.int64)
        factor = K / (K - 1.0)
        pool = np.empty((self.num_leaves, d, int(n_bins.max()), 3))
        nodes = {"feat": [], "thr": [], "left": [], "right": [], "value": []}
        tree_class = []
        self.importance_ = np.zeros(d)
        for _ in range(self.n_estimators):
            P = _softmax(F)
            for k in range(K):
                g = P[:, k] - Y[:, k]
                h = factor * P[:, k] * (1.0 - P[:, k])
                feat, thr, left, right, value, row_value, imp = _grow(
                    binned_t, g, h, rows, n_bins, pool, self.num_leaves, self.max_depth,
                    float(self.min_child_samples), self.min_sum_hessian, self.reg_lambda, self.min_gain,
                )
                value = value * self.learning_rate
                F[:, k] += row_value * self.learning_rate
                for key, arr in zip(("feat", "thr", "left", "right", "value"), (feat, thr, left, right, value)):
                    nodes[key].append(arr)
                tree_class.append(k)
                self.importance_ += imp
        sizes = [len(a) for a in nodes["feat"]]
        self.offsets_ = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.trees_ = {k: np.concatenate(v) for k, v in nodes.items()}
        self.tree_class_ = np.array(tree_class, dtype=np.int64)
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        binned = self.mapper_.transform(X)
        out = np.tile(self.init_, (binned.shape[0], 1))
        t = self.trees_
        return _predict(binned, t["feat"], t["thr"], t["left"], t["right"], t["value"],
                        self.offsets_, self.tree_class_, self.n_classes_, out)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _softmax(self.decision_function(X))

    def feature_importances(self) -> np.ndarray:
        return self.importance_.copy()
