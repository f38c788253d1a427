"""Uniform fit / predict_proba wrappers and ensemble combiners.

Every model exposes ``fit(X, y)``, ``predict_proba(X)``, ``predict(X)`` and
``feature_importances()``.  Probabilities have one column per class id
``0..K-1`` and argmax ties resolve to the lowest class index.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.linear_model import LogisticRegression
from sklearn.svm import LinearSVC

from ..riemann import lw_shrinkage
from .gbdt import GradientBoostedTrees

logger = logging.getLogger(__name__)

KINDS = ("gbdt", "random_forest", "lda_shrinkage", "linear_svm", "logistic")

DEFAULT_PARAMS = {
    "gbdt": dict(n_estimators=500, learning_rate=0.05, num_leaves=31, max_depth=-1,
                 min_child_samples=20, min_sum_hessian=1e-3, reg_lambda=0.0, min_gain=0.0,
                 max_bins=255),
    "random_forest": dict(n_estimators=500, max_features="sqrt", max_depth=None,
                          min_samples_leaf=5, n_jobs=1),
    "lda_shrinkage": dict(shrinkage="auto", standardize=True),
    "linear_svm": dict(C=1.0, max_iter=5000, tol=1e-6, standardize=True),
    "logistic": dict(C=1.0, max_iter=2000, tol=1e-8, standardize=True),
}


class StratificationError(ValueError):
    """A class has too few trials to appear in every fold."""


@dataclass(frozen=True)
class ClassifierSpec:
    """Model kind, hyperparameters (merged over per-kind defaults) and seed."""

    kind: str
    params: Mapping = field(default_factory=dict)
    seed: int = 42

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown classifier kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValueError(f"{self.kind}: unknown hyperparameters {sorted(unknown)}")
        p = self.resolved()
        if self.kind in ("gbdt", "random_forest") and int(p["n_estimators"]) < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.kind == "gbdt":
            if not p["learning_rate"] > 0:
                raise ValueError("learning_rate must be positive")
            if int(p["num_leaves"]) < 2:
                raise ValueError("num_leaves must be >= 2")
        if self.kind == "random_forest" and int(p["min_samples_leaf"]) < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.kind == "lda_shrinkage":
            s = p["shrinkage"]
            if s != "auto" and not (isinstance(s, (int, float)) and 0.0 <= s <= 1.0):
                raise ValueError("shrinkage must be 'auto' or a number in [0, 1]")
        if self.kind in ("linear_svm", "logistic") and not p["C"] > 0:
            raise ValueError("C must be positive")

    def resolved(self) -> dict:
        p = dict(DEFAULT_PARAMS[self.kind])
        p.update(self.params)
        return p

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X {X.shape} and y {y.shape} do not align")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values")
    if y.size == 0 or not np.issubdtype(y.dtype, np.integer) or y.min() < 0:
        raise ValueError("labels must be non-negative integers")
    y = y.astype(np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("training set holds a single class")
    K = int(classes.max()) + 1
    if classes.size != K:
        raise ValueError(f"class ids must be contiguous 0..{K - 1}; got {classes.tolist()}")
    if X.shape[0] < K:
        raise ValueError("fewer trials than classes")
    return X, y, K


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _normalized(w: np.ndarray) -> np.ndarray:
    w = np.abs(np.asarray(w, dtype=np.float64))
    total = w.sum()
    if not total > 0:
        logger.warning("all importances are zero; returning uniform weights")
        return np.full(w.shape, 1.0 / w.size)
    return w / total


class _Scaler:
    """Training-set standardization; constant columns pass through unscaled."""

    def fit(self, X):
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale_ = np.where(sd > 0, sd, 1.0)
        return self

    def transform(self, X):
        return (X - self.mean_) / self.scale_


class _Base:
    spec: ClassifierSpec

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


class ShrinkageLDA(_Base):
    """Linear discriminant with a shrunk pooled covariance.

    ``Sigma = (1 - g) S + g tr(S)/d I`` where ``S`` is the pooled
    within-class covariance and ``g`` is the Ledoit-Wolf intensity of the
    class-centred data when ``shrinkage="auto"``.
    """

    def __init__(self, shrinkage="auto", standardize: bool = True, spec: Optional[ClassifierSpec] = None):
        self.shrinkage = shrinkage
        self.standardize = standardize
        self.spec = spec or ClassifierSpec("lda_shrinkage", {"shrinkage": shrinkage, "standardize": standardize})

    def fit(self, X, y) -> "ShrinkageLDA":
        X, y, K = _check_xy(X, y)
        n, d = X.shape
        if d == 0:
            raise ValueError("LDA needs at least one feature")
        self.scaler_ = _Scaler().fit(X) if self.standardize else None
        Z = self.scaler_.transform(X) if self.scaler_ else X
        self.n_classes_ = K
        self.priors_ = np.bincount(y, minlength=K) / n
        self.means_ = np.stack([Z[y == k].mean(axis=0) for k in range(K)])
        Zc = Z - self.means_[y]
        S, mu, lam = lw_shrinkage(Zc.T)
        gamma = float(lam) if self.shrinkage == "auto" else float(self.shrinkage)
        self.gamma_ = gamma
        sigma = (1.0 - gamma) * S + gamma * float(mu) * np.eye(d)
        if not float(mu) > 0:
            sigma = sigma + np.eye(d)
        # pinv-free solve; sigma is positive definite whenever gamma > 0 or S is
        try:
            W = np.linalg.solve(sigma, self.means_.T).T
        except np.linalg.LinAlgError:
            W = (np.linalg.pinv(sigma) @ self.means_.T).T
        self.coef_ = W
        self.intercept_ = -0.5 * np.einsum("kd,kd->k", W, self.means_) + np.log(self.priors_)
        return self

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        Z = self.scaler_.transform(X) if self.scaler_ else X
        return Z @ self.coef_.T + self.intercept_

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.decision_function(X))

    def feature_importances(self) -> np.ndarray:
        W = self.coef_ - self.coef_.mean(axis=0)
        return _normalized(np.abs(W).mean(axis=0))


class _GBDTModel(_Base):
    def __init__(self, spec: ClassifierSpec):
        self.spec = spec
        p = spec.resolved()
        self.est_ = GradientBoostedTrees(seed=spec.seed, **p)

    def fit(self, X, y):
        X, y, K = _check_xy(X, y)
        self.est_.fit(X, y)
        self.n_classes_ = K
        return self

    def predict_proba(self, X):
        return self.est_.predict_proba(np.asarray(X, dtype=np.float64))

    def feature_importances(self):
        return _normalized(self.est_.feature_importances())


class _SklearnModel(_Base):
    """Shared plumbing for the library-backed models."""

    def __init__(self, spec: ClassifierSpec):
        self.spec = spec
        p = spec.resolved()
        self.standardize = bool(p.pop("standardize", False))
        self.params_ = p

    def _build(self):
        raise NotImplementedError

    def fit(self, X, y):
        X, y, K = _check_xy(X, y)
        self.n_classes_ = K
        self.scaler_ = _Scaler().fit(X) if self.standardize else None
        Z = self.scaler_.transform(X) if self.scaler_ else X
        self.est_ = self._build().fit(Z, y)
        return self

    def _z(self, X):
        X = np.asarray(X, dtype=np.float64)
        return self.scaler_.transform(X) if self.scaler_ else X


class _ForestModel(_SklearnModel):
    def _build(self):
        return RandomForestClassifier(random_state=self.spec.seed, **self.params_)

    def predict_proba(self, X):
        # fixed-order accumulation; the threaded library reduction is not
        # bitwise stable across job counts
        Z = self._z(X).astype(np.float32)
        P = np.zeros((Z.shape[0], self.n_classes_))
        for tree in self.est_.estimators_:
            P += tree.predict_proba(Z)
        return P / P.sum(axis=1, keepdims=True)

    def feature_importances(self):
        return _normalized(self.est_.feature_importances_)


class _LinearSVMModel(_SklearnModel):
    """One-vs-rest squared-hinge SVM; probabilities are a softmax over margins."""

    def _build(self):
        # primal solver: deterministic and free of coordinate shuffling
        return LinearSVC(penalty="l2", loss="squared_hinge", dual=False,
                         random_state=self.spec.seed, **self.params_)

    def decision_function(self, X):
        m = self.est_.decision_function(self._z(X))
        if m.ndim == 1:
            m = np.stack([-m, m], axis=1)
        return m

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def feature_importances(self):
        return _normalized(np.abs(self.est_.coef_).mean(axis=0))


class _LogisticModel(_SklearnModel):
    def _build(self):
        return LogisticRegression(random_state=self.spec.seed, **self.params_)

    def predict_proba(self, X):
        return self.est_.predict_proba(self._z(X))

    def feature_importances(self):
        return _normalized(np.abs(self.est_.coef_).mean(axis=0))


def make_model(spec: ClassifierSpec):
    """Unfitted model for ``spec``."""
    if spec.kind == "gbdt":
        return _GBDTModel(spec)
    if spec.kind == "lda_shrinkage":
        p = spec.resolved()
        return ShrinkageLDA(p["shrinkage"], p["standardize"], spec=spec)
    if spec.kind == "random_forest":
        return _ForestModel(spec)
    if spec.kind == "linear_svm":
        return _LinearSVMModel(spec)
    return _LogisticModel(spec)


def fit(spec: ClassifierSpec, X, y):
    return make_model(spec).fit(X, y)


def lda_shrinkage_fit(X, y, gamma="auto", standardize: bool = True) -> ShrinkageLDA:
    return ShrinkageLDA(gamma, standardize).fit(X, y)


def feature_importance(model) -> np.ndarray:
    """Non-negative per-feature weights normalized to unit sum."""
    fn = getattr(model, "feature_importances", None)
    if fn is None:
        raise TypeError(f"{type(model).__name__} does not expose feature importances")
    return fn()


def soft_vote(probas: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of probability tables, renormalized per row."""
    if len(probas) == 0:
        raise ValueError("nothing to average")
    shapes = {np.shape(p) for p in probas}
    if len(shapes) != 1:
        raise ValueError(f"probability tables differ in shape: {sorted(shapes)}")
    P = np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in probas]), axis=0)
    return P / P.sum(axis=-1, keepdims=True)


def stratified_folds(y, k: int, seed: int = 42) -> np.ndarray:
    """Fold id per trial: seeded shuffle, then round-robin within each class.

    Fold sizes per class differ by at most one trial.  The round-robin start
    rotates across classes so total fold sizes stay balanced too.
    """
    y = np.asarray(y)
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), dtype=np.int64)
    offset = 0
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if idx.size < k:
            raise StratificationError(f"class {c} has {idx.size} trials, fewer than k={k}")
        idx = idx[rng.permutation(idx.size)]
        fold[idx] = (np.arange(idx.size) + offset) % k
        offset = (offset + idx.size) % k
    return fold


class StackingModel(_Base):
    """Out-of-fold stacked generalization.

    Base probabilities from an inner stratified k-fold become the
    meta-learner's inputs (trials x bases*K); the bases are then refitted on
    all training trials for prediction.
    """

    def __init__(self, base_specs: Sequence[ClassifierSpec], meta_spec: ClassifierSpec, inner_k: int = 3):
        if not base_specs:
            raise ValueError("stacking needs at least one base model")
        if inner_k < 2:
            raise ValueError("inner_k must be >= 2")
        self.base_specs = list(base_specs)
        self.meta_spec = meta_spec
        self.inner_k = inner_k
        self.spec = meta_spec

    def fit(self, X, y, bases: Optional[Sequence] = None) -> "StackingModel":
        """``bases`` may hold the base models already fitted on ``(X, y)``."""
        X, y, K = _check_xy(X, y)
        self.n_classes_ = K
        folds = stratified_folds(y, self.inner_k, self.meta_spec.seed)
        meta = np.zeros((len(y), len(self.base_specs) * K))
        for f in range(self.inner_k):
            test = folds == f
            for b, spec in enumerate(self.base_specs):
                model = make_model(spec).fit(X[~test], y[~test])
                meta[test, b * K:(b + 1) * K] = model.predict_proba(X[test])
        self.meta_features_ = meta
        self.meta_ = make_model(self.meta_spec).fit(meta, y)
        if bases is not None and len(bases) != len(self.base_specs):
            raise ValueError("one fitted model per base spec expected")
        self.bases_ = list(bases) if bases is not None else [make_model(s).fit(X, y) for s in self.base_specs]
        return self

    def meta_transform(self, X) -> np.ndarray:
        return np.hstack([m.predict_proba(X) for m in self.bases_])

    def predict_proba(self, X) -> np.ndarray:
        return self.meta_.predict_proba(self.meta_transform(X))

    def feature_importances(self) -> np.ndarray:
        return feature_importance(self.meta_)


def stacking(base_specs: Sequence[ClassifierSpec], meta_spec: ClassifierSpec, X, y,
             inner_k: int = 3, bases: Optional[Sequence] = None) -> StackingModel:
    return StackingModel(base_specs, meta_spec, inner_k).fit(X, y, bases)
