"""Evaluation protocols and the executable leakage audit.

Every protocol reduces to evaluating a set of pipelines on one
``(train_index, test_index)`` split.  Pipelines log each fitted quantity
(normalizer, PCA, alignment reference, geometric mean, classifier) with the
subjects it was fitted on, and :func:`leakage_audit` checks those records
against the declared split.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from . import __version__
from .classify import ClassifierSpec, ShrinkageLDA, feature_importance, make_model, soft_vote, stacking
from .epochs import EpochSet
from .features import BANDS, FeatureMatrix, apply_pca, extract, fit_pca
from .preprocess import apply_normalizer, check_pipeline_order, fit_normalizer
from .riemann import MDM, align_by_subject, geometric_mean, lw_covariance, tangent_embed

logger = logging.getLogger(__name__)

CHECKPOINTS = ("normalization leakage", "validation leakage", "subject overlap", "epoch overlap")
VALIDATION_FRACTION = 0.2


class AuditError(RuntimeError):
    """Raised by strict protocols when a checkpoint fails."""

    def __init__(self, message: str, verdicts: Sequence["Verdict"]):
        super().__init__(message)
        self.verdicts = list(verdicts)


# ---------------------------------------------------------------- audit trail

@dataclass(frozen=True)
class AuditRecord:
    fold: str
    operation: str
    kind: str                 # fit | apply | per_subject | split
    fit_scope: tuple
    data_scope: tuple = ()
    detail: str = ""

    def to_dict(self) -> dict:
        return {"fold": self.fold, "operation": self.operation, "kind": self.kind,
                "fit_scope": list(self.fit_scope), "data_scope": list(self.data_scope),
                "detail": self.detail}


@dataclass
class AuditTrail:
    """Append-only log of fit scopes plus the declared split of every fold."""

    protocol: str = "loso"
    records: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)
    epoch_meta: dict = field(default_factory=dict)

    def log(self, fold, operation, kind, fit_scope, data_scope=(), detail=""):
        self.records.append(AuditRecord(str(fold), operation, kind, tuple(sorted(set(fit_scope))),
                                        tuple(sorted(set(data_scope))), detail))

    def declare_split(self, fold, epochs: EpochSet, train_index, test_index, val_subjects=()):
        train_index = np.asarray(train_index)
        test_index = np.asarray(test_index)
        self.splits[str(fold)] = {
            "train_subjects": sorted(set(epochs.subjects[train_index].tolist())),
            "test_subjects": sorted(set(epochs.subjects[test_index].tolist())),
            "train_index": [int(i) for i in train_index],
            "test_index": [int(i) for i in test_index],
            "validation_subjects": sorted(val_subjects),
        }

    def set_epoch_meta(self, epochs: EpochSet):
        self.epoch_meta = {
            "n_samples": epochs.n_samples,
            "tmin": epochs.tmin,
            "fs": epochs.fs,
            "onsets": None if epochs.onsets is None else [int(v) for v in epochs.onsets],
            "recordings": None if epochs.recordings is None else epochs.recordings.tolist(),
            "history": list(epochs.history) + ["normalize"],
        }

    def merge(self, other: "AuditTrail"):
        self.records.extend(other.records)
        self.splits.update(other.splits)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "pipeline_order": self.epoch_meta.get("history", []),
            "records": [r.to_dict() for r in self.records],
            "splits": {k: {kk: vv for kk, vv in v.items() if not kk.endswith("_index")}
                       for k, v in sorted(self.splits.items())},
        }


@dataclass(frozen=True)
class Verdict:
    checkpoint: str
    passed: bool
    witness: Optional[dict] = None

    def to_dict(self) -> dict:
        return {"checkpoint": self.checkpoint, "verdict": "pass" if self.passed else "fail",
                "witness": self.witness}


def _check_fit_scopes(trail: AuditTrail) -> Verdict:
    for rec in trail.records:
        if rec.kind != "fit":
            continue
        split = trail.splits.get(rec.fold)
        if split is None:
            return Verdict(CHECKPOINTS[0], False, {"record": rec.to_dict(), "reason": "undeclared fold"})
        outside = sorted(set(rec.fit_scope) - set(split["train_subjects"]))
        if outside:
            return Verdict(CHECKPOINTS[0], False, {"record": rec.to_dict(), "outside_training": outside})
    return Verdict(CHECKPOINTS[0], True)


def _check_validation(trail: AuditTrail) -> Verdict:
    for fold, split in sorted(trail.splits.items()):
        val = set(split["validation_subjects"])
        if trail.protocol == "within_subject":
            continue
        bad = sorted(val & set(split["test_subjects"]))
        stray = sorted(val - set(split["train_subjects"]))
        if bad or stray:
            return Verdict(CHECKPOINTS[1], False, {"fold": fold, "validation_in_test": bad,
                                                   "validation_outside_train": stray})
    for rec in trail.records:
        if rec.kind == "split" and rec.fold in trail.splits and trail.protocol != "within_subject":
            bad = sorted(set(rec.fit_scope) & set(trail.splits[rec.fold]["test_subjects"]))
            if bad:
                return Verdict(CHECKPOINTS[1], False, {"record": rec.to_dict(), "validation_in_test": bad})
    return Verdict(CHECKPOINTS[1], True)


def _check_overlap(trail: AuditTrail) -> Verdict:
    for fold, split in sorted(trail.splits.items()):
        shared_idx = sorted(set(split["train_index"]) & set(split["test_index"]))
        if shared_idx:
            return Verdict(CHECKPOINTS[2], False, {"fold": fold, "shared_trials": shared_idx[:10],
                                                   "n_shared": len(shared_idx)})
        if trail.protocol == "within_subject":
            continue
        shared = sorted(set(split["train_subjects"]) & set(split["test_subjects"]))
        if shared:
            return Verdict(CHECKPOINTS[2], False, {"fold": fold, "shared_subjects": shared})
    return Verdict(CHECKPOINTS[2], True)


def _check_epochs(trail: AuditTrail) -> Verdict:
    meta = trail.epoch_meta
    if not meta or meta.get("onsets") is None or meta.get("recordings") is None:
        return Verdict(CHECKPOINTS[3], False, {"reason": "no onset metadata; cannot verify stimulus locking"})
    order = check_pipeline_order(meta.get("history", ()))
    if order:
        return Verdict(CHECKPOINTS[3], False, {"reason": order})
    onsets = np.asarray(meta["onsets"])
    recs = np.asarray(meta["recordings"])
    n = int(meta["n_samples"])
    for rec in sorted(set(recs.tolist())):
        o = np.sort(onsets[recs == rec])
        gaps = np.diff(o)
        if gaps.size and gaps.min() < n:
            i = int(np.argmin(gaps))
            return Verdict(CHECKPOINTS[3], False, {"recording": rec, "onsets": [int(o[i]), int(o[i + 1])],
                                                   "window_samples": n})
    return Verdict(CHECKPOINTS[3], True)


def leakage_audit(trail: AuditTrail) -> list:
    """Four verdicts: fit scopes, validation split, train/test overlap, epoch overlap."""
    return [_check_fit_scopes(trail), _check_validation(trail), _check_overlap(trail), _check_epochs(trail)]


# ---------------------------------------------------------------- metrics

def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    C = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(C, (np.asarray(y_true, int), np.asarray(y_pred, int)), 1)
    return C


def _present_rows(confusion):
    C = np.asarray(confusion, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or np.any(C < 0):
        raise ValueError("confusion must be a non-negative square matrix")
    rows = C.sum(axis=1)
    present = rows > 0
    if not present.all():
        logger.warning("classes %s have no trials and are excluded", np.flatnonzero(~present).tolist())
    if not present.any():
        raise ValueError("confusion matrix is empty")
    return C, rows, present


def balanced_accuracy(confusion) -> float:
    """Mean per-class recall over classes that have trials."""
    C, rows, present = _present_rows(confusion)
    return float((np.diag(C)[present] / rows[present]).mean())


def macro_f1(confusion) -> float:
    """Mean per-class F1 over classes that have trials."""
    C, rows, present = _present_rows(confusion)
    tp = np.diag(C)
    denom = rows + C.sum(axis=0)
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    return float(f1[present].mean())


def cohens_d(values, chance: float = 0.2) -> float:
    """``(mean - chance) / sd`` with ddof=1."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("Cohen's d needs at least two folds")
    diff = v.mean() - chance
    sd = v.std(ddof=1)
    if sd <= 1e-12:
        return 0.0 if abs(diff) <= 1e-12 else float(np.sign(diff) * np.inf)
    return float(diff / sd)


@dataclass
class FoldResult:
    model: str
    fold: str
    index: np.ndarray
    y_true: np.ndarray
    y_pred: np.ndarray
    proba: np.ndarray
    confusion: np.ndarray
    balanced_acc: float
    macro_f1: float
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_proba(cls, model, fold, index, y_true, proba, n_classes):
        proba = np.asarray(proba, dtype=np.float64)
        y_pred = np.argmax(proba, axis=1)
        C = confusion_matrix(y_true, y_pred, n_classes)
        return cls(model, str(fold), np.asarray(index), np.asarray(y_true), y_pred, proba, C,
                   balanced_accuracy(C), macro_f1(C))


# ---------------------------------------------------------------- pipelines

@dataclass
class FoldContext:
    """What a pipeline may see while handling one split."""

    fold: str
    train_index: np.ndarray
    test_index: np.ndarray
    trail: AuditTrail
    full: EpochSet
    cache: dict
    n_classes: int
    validation_subjects: tuple = ()

    def fit(self, operation, subjects, detail=""):
        self.trail.log(self.fold, operation, "fit", subjects, detail=detail)

    def apply(self, operation, subjects, detail=""):
        self.trail.log(self.fold, operation, "apply", subjects, subjects, detail=detail)

    def per_subject(self, operation, subjects, detail=""):
        for s in sorted(set(subjects)):
            self.trail.log(self.fold, operation, "per_subject", (s,), (s,), detail=detail)


class Pipeline:
    """``fit(train, ctx)`` then ``predict_proba(test, ctx)``; one copy per split."""

    name = "pipeline"

    def fit(self, train: EpochSet, ctx: FoldContext):
        raise NotImplementedError

    def predict_proba(self, test: EpochSet, ctx: FoldContext) -> np.ndarray:
        raise NotImplementedError


class _Normalized(Pipeline):
    normalize = True

    def fit_normalizer(self, train: EpochSet, ctx: FoldContext):
        """Train-scoped z-score statistics (override point for leakage fixtures)."""
        return fit_normalizer(train)

    def _normalized_pair(self, train, test, ctx):
        if not self.normalize:
            return train, test
        # keyed on the hook so an overriding subclass never shares statistics
        key = ("normalized", type(self).fit_normalizer)
        if key not in ctx.cache:
            norm = self.fit_normalizer(train, ctx)
            ctx.fit("normalize", norm.subjects)
            ctx.cache[key] = (norm, apply_normalizer(norm, train), apply_normalizer(norm, test))
        norm, tr, te = ctx.cache[key]
        self.normalizer_ = norm
        return tr, te


class FeaturePipeline(_Normalized):
    """Normalize, extract hand-crafted features, optional PCA, classifier."""

    def __init__(self, spec: ClassifierSpec, families: Sequence[str] = ("bandpower", "de", "hjorth", "temporal"),
                 pca_k: Optional[int] = None, bands=BANDS, channels: Optional[Sequence[str]] = None,
                 normalize: bool = True, name: Optional[str] = None, keep_importance: bool = False):
        self.spec = spec
        self.keep_importance = keep_importance
        self.families = tuple(families)
        self.pca_k = pca_k
        self.bands = tuple(bands)
        self.channels = None if channels is None else tuple(channels)
        self.normalize = normalize
        self.name = name or spec.kind

    def _features(self, train, test, ctx):
        key = ("features", type(self).fit_normalizer, self.families, self.bands, self.channels, self.normalize)
        if key not in ctx.cache:
            tr, te = self._normalized_pair(train, test, ctx)
            if self.channels is not None:
                tr, te = tr.pick_channels(self.channels), te.pick_channels(self.channels)
            ctx.cache[key] = (extract(tr, self.families, self.bands), extract(te, self.families, self.bands))
        return ctx.cache[key]

    def fit_pca(self, f_train: FeatureMatrix, ctx: FoldContext):
        """Principal axes from training features (override point for leakage fixtures)."""
        return fit_pca(f_train, self.pca_k)

    def _project(self, f_train, f_test, ctx):
        if self.pca_k is None:
            return f_train, f_test
        key = ("projected", type(self).fit_normalizer, type(self).fit_pca, self.families, self.bands,
               self.channels, self.normalize, self.pca_k)
        if key not in ctx.cache:
            pca = self.fit_pca(f_train, ctx)
            ctx.fit("pca", pca.subjects, detail=f"k={self.pca_k}")
            ctx.cache[key] = (apply_pca(pca, f_train), apply_pca(pca, f_test))
        return ctx.cache[key]

    def _model(self, spec: Optional[ClassifierSpec] = None):
        return make_model(spec or self.spec)

    def _fitted(self, spec, test, ctx):
        """Model for ``spec`` on this fold's training features, fitted once per
        fold and shared by standalone, voting and stacking pipelines."""
        key = ("fitted", type(self).fit_normalizer, type(self).fit_pca, type(self)._model, repr(spec),
               self.families, self.bands, self.channels, self.normalize, self.pca_k)
        if key not in ctx.cache:
            f_train, f_test = self._project(*self._features(self._train, test, ctx), ctx)
            model = self._model(spec).fit(f_train.values, self._train.labels)
            ctx.cache[key] = (model, f_train.registry, model.predict_proba(f_test.values))
        return ctx.cache[key]

    def fit(self, train, ctx):
        self._train = train
        return self

    def predict_proba(self, test, ctx):
        self.model_, self.registry_, proba = self._fitted(self.spec, test, ctx)
        ctx.fit(f"classifier:{self.name}", self._train.subject_ids())
        ctx.apply(f"predict:{self.name}", test.subject_ids())
        if self.keep_importance:
            self.fold_extra_ = {"importance": feature_importance(self.model_), "registry": self.registry_}
        return proba.copy()


class StackingPipeline(FeaturePipeline):
    """Out-of-fold stacking on the hand-crafted features."""

    def __init__(self, base_specs: Sequence[ClassifierSpec], meta_spec: ClassifierSpec, inner_k: int = 3,
                 name: str = "stacking", **kwargs):
        super().__init__(meta_spec, name=name, **kwargs)
        self.base_specs = list(base_specs)
        self.inner_k = inner_k

    def predict_proba(self, test, ctx):
        f_train, f_test = self._project(*self._features(self._train, test, ctx), ctx)
        bases = [self._fitted(spec, test, ctx)[0] for spec in self.base_specs]
        self.model_ = stacking(self.base_specs, self.spec, f_train.values, self._train.labels, self.inner_k,
                               bases=bases)
        ctx.fit(f"classifier:{self.name}", self._train.subject_ids())
        return self.model_.predict_proba(f_test.values)


class PrecomputedPipeline(Pipeline):
    """Classifier on a precomputed feature matrix indexed like the epochs."""

    def __init__(self, features: FeatureMatrix, spec: ClassifierSpec, name: Optional[str] = None):
        self.features = features
        self.spec = spec
        self.name = name or f"{spec.kind}:precomputed"

    def fit(self, train, ctx):
        X = self.features.values[ctx.train_index]
        self.model_ = make_model(self.spec).fit(X, train.labels)
        ctx.fit(f"classifier:{self.name}", train.subject_ids())
        return self

    def predict_proba(self, test, ctx):
        return self.model_.predict_proba(self.features.values[ctx.test_index])


RIEMANN_KINDS = ("mdm", "ts_lda", "ts_svm")


class RiemannPipeline(_Normalized):
    """LW covariances, optional per-subject Euclidean alignment, then MDM or
    tangent-space projection at the training geometric mean plus a linear head."""

    def __init__(self, kind: str = "mdm", ea: bool = False, normalize: bool = True,
                 head: Optional[ClassifierSpec] = None, max_iter: int = 50, name: Optional[str] = None):
        if kind not in RIEMANN_KINDS:
            raise ValueError(f"kind must be one of {RIEMANN_KINDS}")
        self.kind = kind
        self.ea = ea
        self.normalize = normalize
        self.max_iter = max_iter
        if head is None and kind != "mdm":
            head = ClassifierSpec("lda_shrinkage" if kind == "ts_lda" else "linear_svm")
        self.head = head
        self.name = name or (kind.upper().replace("_", "-") + ("+EA" if ea else ""))

    def _covs(self, train, test, ctx):
        key = ("covs", type(self).__qualname__, self.normalize, self.ea)
        if key not in ctx.cache:
            tr, te = self._normalized_pair(train, test, ctx)
            c_tr, c_te = lw_covariance(tr.data), lw_covariance(te.data)
            if self.ea:
                # label-free and computed within each subject, test subject included
                c_tr, _ = align_by_subject(c_tr, tr.subjects)
                c_te, _ = align_by_subject(c_te, te.subjects)
                ctx.per_subject("euclidean_alignment", list(tr.subjects) + list(te.subjects))
            ctx.cache[key] = (c_tr, c_te)
        return ctx.cache[key]

    def fit(self, train, ctx):
        self._train = train
        return self

    def predict_proba(self, test, ctx):
        c_tr, c_te = self._covs(self._train, test, ctx)
        y = self._train.labels
        subjects = self._train.subject_ids()
        if self.kind == "mdm":
            self.model_ = MDM(max_iter=self.max_iter, strict=False).fit(c_tr, y, ctx.n_classes)
            ctx.fit(f"class_means:{self.name}", subjects)
            return self.model_.predict_proba(c_te)
        G = geometric_mean(c_tr, max_iter=self.max_iter, strict=False)
        ctx.fit(f"reference_mean:{self.name}", subjects)
        v_tr, v_te = tangent_embed(c_tr, G), tangent_embed(c_te, G)
        self.model_ = make_model(self.head).fit(v_tr, y)
        ctx.fit(f"classifier:{self.name}", subjects)
        return self.model_.predict_proba(v_te)


class SoftVotePipeline(Pipeline):
    """Average the probability rows of several member pipelines."""

    def __init__(self, members: Sequence[Pipeline], name: str = "soft_vote"):
        self.members = list(members)
        self.name = name

    def fit(self, train, ctx):
        for m in self.members:
            m.fit(train, ctx)
        return self

    def predict_proba(self, test, ctx):
        return soft_vote([m.predict_proba(test, ctx) for m in self.members])


def default_pipelines(gbdt_params: Optional[Mapping] = None, rf_params: Optional[Mapping] = None,
                      families=("bandpower", "de", "hjorth", "temporal"), seed: int = 42) -> dict:
    """Every implemented model: five feature-based classifiers and five Riemannian ones."""
    specs = {
        "gbdt": ClassifierSpec("gbdt", dict(gbdt_params or {}), seed),
        "random_forest": ClassifierSpec("random_forest", dict(rf_params or {}), seed),
        "lda_shrinkage": ClassifierSpec("lda_shrinkage", {}, seed),
        "linear_svm": ClassifierSpec("linear_svm", {}, seed),
        "logistic": ClassifierSpec("logistic", {}, seed),
    }
    out = {name: FeaturePipeline(spec, families, name=name) for name, spec in specs.items()}
    for kind, ea in (("mdm", False), ("mdm", True), ("ts_lda", False), ("ts_svm", False), ("ts_svm", True)):
        p = RiemannPipeline(kind, ea)
        out[p.name] = p
    return out


# ---------------------------------------------------------------- split runner

def derive_seed(seed: int, purpose: str, *parts) -> int:
    """Stable integer seed for a named purpose (independent of call order)."""
    import hashlib
    text = "|".join([str(int(seed)), purpose] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def validation_subjects(train_subjects, test_subjects, seed, fold) -> tuple:
    pool = sorted(set(train_subjects) - set(test_subjects))
    if len(pool) < 2:
        return ()
    n_val = max(1, int(round(VALIDATION_FRACTION * len(pool))))
    rng = np.random.default_rng(derive_seed(seed, "validation", fold))
    return tuple(sorted(rng.choice(pool, size=n_val, replace=False).tolist()))


def _as_dict(pipelines) -> dict:
    if isinstance(pipelines, Pipeline):
        return {pipelines.name: pipelines}
    if isinstance(pipelines, Mapping):
        return dict(pipelines)
    return {p.name: p for p in pipelines}


def evaluate_split(epochs: EpochSet, pipelines, fold, train_index, test_index, n_classes: int,
                   seed: int = 42, protocol: str = "loso"):
    """Fit and score every pipeline on one split; returns ``(results, trail)``."""
    train_index = np.asarray(train_index)
    test_index = np.asarray(test_index)
    trail = AuditTrail(protocol)
    train, test = epochs.select(train_index), epochs.select(test_index)
    val = validation_subjects(train.subject_ids(), test.subject_ids(), seed, fold) if protocol != "within_subject" else ()
    trail.declare_split(fold, epochs, train_index, test_index, val)
    if val:
        trail.log(fold, "validation_split", "split", val, detail=f"fraction={VALIDATION_FRACTION}")
    ctx = FoldContext(str(fold), train_index, test_index, trail, epochs, {}, n_classes, val)
    results = {}
    for name, pipe in _as_dict(pipelines).items():
        p = copy.deepcopy(pipe)
        p.fit(train, ctx)
        proba = p.predict_proba(test, ctx)
        results[name] = FoldResult.from_proba(name, fold, test_index, test.labels, proba, n_classes)
        results[name].extra = dict(getattr(p, "fold_extra_", {}))
    return results, trail


def _run_parallel(jobs, n_jobs):
    if n_jobs == 1 or len(jobs) <= 1:
        return [fn(*args) for fn, args in jobs]
    return Parallel(n_jobs=n_jobs)(delayed(fn)(*args) for fn, args in jobs)


@dataclass
class ProtocolResult:
    """Fold results per model (ordered by fold id), the audit trail and verdicts."""

    folds: Dict[str, list]
    trail: AuditTrail
    verdicts: list
    n_classes: int

    @property
    def models(self) -> list:
        return list(self.folds)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def accuracies(self, model: str) -> np.ndarray:
        return np.array([f.balanced_acc for f in self.folds[model]])

    def mean_accuracy(self, model: str) -> float:
        return float(self.accuracies(model).mean())

    def confusion(self, model: str, normalize: bool = False) -> np.ndarray:
        C = sum(f.confusion for f in self.folds[model]).astype(np.float64)
        if normalize:
            rows = C.sum(axis=1, keepdims=True)
            C = np.divide(C, rows, out=np.zeros_like(C), where=rows > 0)
        return C

    def predictions(self, model: str) -> list:
        return [(f.y_true, f.y_pred) for f in self.folds[model]]

    def summary(self, chance: Optional[float] = None) -> list:
        chance = chance if chance is not None else 1.0 / self.n_classes
        rows = []
        for m in self.models:
            acc = self.accuracies(m)
            rows.append({"model": m, "mean": float(acc.mean()),
                         "sd": float(acc.std(ddof=1)) if acc.size > 1 else 0.0,
                         "d": cohens_d(acc, chance) if acc.size > 1 else float("nan"),
                         "macro_f1": float(np.mean([f.macro_f1 for f in self.folds[m]]))})
        return rows


def _collect(outputs, trail: AuditTrail, n_classes: int, strict: bool) -> ProtocolResult:
    folds: Dict[str, list] = {}
    for results, sub in sorted(outputs, key=lambda o: next(iter(o[1].splits))):
        trail.merge(sub)
        for name, fr in results.items():
            folds.setdefault(name, []).append(fr)
    verdicts = leakage_audit(trail)
    out = ProtocolResult(folds, trail, verdicts, n_classes)
    failed = [v for v in verdicts if not v.passed]
    if failed:
        logger.error("leakage audit failed: %s", [v.checkpoint for v in failed])
        if strict:
            raise AuditError(f"leakage audit failed at {failed[0].checkpoint}: {failed[0].witness}", verdicts)
    return out


def _n_classes(epochs: EpochSet, n_classes: Optional[int]) -> int:
    return int(n_classes or int(epochs.labels.max()) + 1)


def loso_folds(epochs: EpochSet) -> list:
    """``(subject, train_index, test_index)`` per held-out subject, in subject order."""
    out = []
    for sid in epochs.subject_ids():
        test = np.flatnonzero(epochs.subjects == sid)
        train = np.flatnonzero(epochs.subjects != sid)
        out.append((sid, train, test))
    return out


def loso(epochs: EpochSet, pipelines, seed: int = 42, n_jobs: int = 1, strict: bool = False,
         folds: Optional[Sequence] = None, n_classes: Optional[int] = None) -> ProtocolResult:
    """Leave-one-subject-out evaluation of one or several pipelines.

    ``folds`` overrides the split list (used by the audit fixtures).  With
    ``strict=True`` a failed checkpoint raises :class:`AuditError`.
    """
    if len(epochs.subject_ids()) < 2:
        raise ValueError("LOSO needs at least two subjects")
    K = _n_classes(epochs, n_classes)
    pipelines = _as_dict(pipelines)
    folds = loso_folds(epochs) if folds is None else list(folds)
    jobs = [(evaluate_split, (epochs, pipelines, sid, tr, te, K, seed, "loso")) for sid, tr, te in folds]
    trail = AuditTrail("loso")
    trail.set_epoch_meta(epochs)
    return _collect(_run_parallel(jobs, n_jobs), trail, K, strict)


def within_subject_cv(epochs: EpochSet, pipelines, k: int = 5, seed: int = 42, n_jobs: int = 1,
                      strict: bool = False, n_classes: Optional[int] = None) -> ProtocolResult:
    """Stratified k-fold inside each subject (seeded shuffle, round-robin per class).

    Subjects with fewer than ``k`` trials of some present class are skipped
    with a warning.  Fold ids are ``"<subject>/f<i>"``.
    """
    from .classify import StratificationError, stratified_folds

    K = _n_classes(epochs, n_classes)
    jobs = []
    for sid in epochs.subject_ids():
        idx = np.flatnonzero(epochs.subjects == sid)
        y = epochs.labels[idx]
        try:
            assign = stratified_folds(y, k, derive_seed(seed, "within_subject", sid))
        except StratificationError as exc:
            logger.warning("skipping %s in within-subject CV: %s", sid, exc)
            continue
        for f in range(k):
            jobs.append((evaluate_split, (epochs, _as_dict(pipelines), f"{sid}/f{f}", idx[assign != f],
                                          idx[assign == f], K, seed, "within_subject")))
    if not jobs:
        raise ValueError("no subject has enough trials for stratified CV")
    trail = AuditTrail("within_subject")
    trail.set_epoch_meta(epochs)
    return _collect(_run_parallel(jobs, n_jobs), trail, K, strict)


def per_subject_means(result: ProtocolResult, model: str) -> dict:
    out: Dict[str, list] = {}
    for f in result.folds[model]:
        out.setdefault(f.fold.split("/")[0], []).append(f.balanced_acc)
    return {s: float(np.mean(v)) for s, v in sorted(out.items())}


# ---------------------------------------------------------------- TGM

def tgm_time_index(n_samples: int, step: int = 4) -> np.ndarray:
    if step < 1 or step >= n_samples:
        raise ValueError("step must lie in [1, n_samples)")
    return np.arange(0, n_samples, step)


def _tgm_fold(epochs, fold, train_index, test_index, step, shrinkage, K):
    trail = AuditTrail("loso")
    trail.declare_split(fold, epochs, train_index, test_index)
    train, test = epochs.select(train_index), epochs.select(test_index)
    norm = fit_normalizer(train)
    trail.log(fold, "normalize", "fit", norm.subjects)
    tr = apply_normalizer(norm, train).data
    te = apply_normalizer(norm, test).data
    tix = tgm_time_index(epochs.n_samples, step)
    Xte = te[:, :, tix]                       # trials x channels x T
    y_te = test.labels
    T = tix.size
    M = np.zeros((T, T))
    for a, t in enumerate(tix):
        lda = ShrinkageLDA(shrinkage, standardize=True).fit(tr[:, :, t], train.labels)
        Z = (np.moveaxis(Xte, 2, 1) - lda.scaler_.mean_) / lda.scaler_.scale_   # trials x T x channels
        scores = Z @ lda.coef_.T + lda.intercept_                                  # trials x T x K
        pred = scores.argmax(axis=-1)
        for b in range(T):
            M[a, b] = balanced_accuracy(confusion_matrix(y_te, pred[:, b], K))
    trail.log(fold, "classifier:tgm_lda", "fit", train.subject_ids(), detail=f"{T} time points")
    return M, trail


def tgm(epochs: EpochSet, step: int = 4, shrinkage="auto", seed: int = 42, n_jobs: int = 1,
        n_classes: Optional[int] = None, strict: bool = False):
    """Temporal generalization under LOSO.

    Returns ``(matrix, times, result)``: ``matrix[i, j]`` is the fold-mean
    balanced accuracy of the decoder trained at ``times[i]`` and tested at
    ``times[j]``.
    """
    tix = tgm_time_index(epochs.n_samples, step)
    K = _n_classes(epochs, n_classes)
    jobs = [(_tgm_fold, (epochs, sid, tr, te, step, shrinkage, K)) for sid, tr, te in loso_folds(epochs)]
    outs = _run_parallel(jobs, n_jobs)
    trail = AuditTrail("loso")
    trail.set_epoch_meta(epochs)
    for _, sub in outs:
        trail.merge(sub)
    verdicts = leakage_audit(trail)
    if strict and not all(v.passed for v in verdicts):
        raise AuditError("leakage audit failed in TGM", verdicts)
    M = np.mean([m for m, _ in outs], axis=0)
    return M, epochs.times[tix], verdicts


# ---------------------------------------------------------------- learning curve

LEARNING_CURVE_NS = (1, 3, 5, 7, 9, 11, 13, 15)


def learning_curve(epochs: EpochSet, pipeline, Ns: Sequence[int] = LEARNING_CURVE_NS, reps: int = 5,
                   seed: int = 42, n_jobs: int = 1, n_classes: Optional[int] = None) -> list:
    """Balanced accuracy when training on ``N`` random subjects and testing on the rest.

    Returns rows ``{"n": N, "mean", "sd", "values"}``.
    """
    subjects = epochs.subject_ids()
    K = _n_classes(epochs, n_classes)
    for N in Ns:
        if not 1 <= N < len(subjects):
            raise ValueError(f"N={N} must lie in [1, {len(subjects) - 1}]")
    name, pipe = next(iter(_as_dict(pipeline).items()))
    jobs, keys = [], []
    for N in Ns:
        for r in range(reps):
            rng = np.random.default_rng(derive_seed(seed, "learning_curve", N, r))
            chosen = set(rng.choice(subjects, size=N, replace=False).tolist())
            mask = np.isin(epochs.subjects, sorted(chosen))
            jobs.append((evaluate_split, (epochs, {name: pipe}, f"N{N}/r{r}", np.flatnonzero(mask),
                                          np.flatnonzero(~mask), K, seed, "learning_curve")))
            keys.append(N)
    outs = _run_parallel(jobs, n_jobs)
    values: Dict[int, list] = {}
    for N, (res, _) in zip(keys, outs):
        values.setdefault(N, []).append(res[name].balanced_acc)
    return [{"n": N, "mean": float(np.mean(v)), "sd": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0,
             "values": v} for N, v in sorted(values.items())]


# ---------------------------------------------------------------- ablation

ABLATION_AXES = ("feature_family", "time_window", "channel_region", "pca")


def ablation_run(epochs: EpochSet, axis: str, grid, spec: ClassifierSpec,
                 families: Sequence[str] = ("bandpower", "de", "hjorth", "temporal"),
                 seed: int = 42, n_jobs: int = 1, n_classes: Optional[int] = None) -> list:
    """One LOSO run per grid point with everything else fixed.

    ``grid`` by axis: family names or ``"all"``; ``(tmin, tmax)`` windows;
    a mapping ``region -> channel names`` (``"full"`` or None = all); PCA
    component counts (None = no PCA).
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"axis must be one of {ABLATION_AXES}")
    K = _n_classes(epochs, n_classes)
    chance = 1.0 / K
    items = list(grid.items()) if isinstance(grid, Mapping) else [(g, g) for g in grid]
    rows = []
    for label, value in items:
        data, fams, chans, k = epochs, tuple(families), None, None
        if axis == "feature_family":
            fams = tuple(families) if value == "all" else (value,)
        elif axis == "time_window":
            lo, hi = value
            if not hi > lo:
                raise ValueError(f"empty time window {value}")
            data = epochs.time_slice(lo, hi)
            label = f"[{lo:g}, {hi:g}]"
        elif axis == "channel_region":
            if value is not None and value != "full":
                chans = tuple(value)
                if not chans:
                    raise ValueError(f"region {label!r} has no channels")
        else:
            k = value
        pipe = FeaturePipeline(spec, fams, pca_k=k, channels=chans, name=spec.kind)
        res = loso(data, pipe, seed=seed, n_jobs=n_jobs, n_classes=K)
        acc = res.accuracies(spec.kind)
        rows.append({"axis": axis, "level": str(label), "model": spec.kind, "mean": float(acc.mean()),
                     "sd": float(acc.std(ddof=1)) if acc.size > 1 else 0.0,
                     "delta_vs_chance": float(acc.mean() - chance),
                     "n_channels": len(chans) if chans else data.n_channels, "passed_audit": res.passed})
    return rows


# ---------------------------------------------------------------- writers

def header_line(config_hash: str = "none", seed: int = 42) -> str:
    return f"# vowelbench={__version__} config_sha256={config_hash} seed={seed}"


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


def write_csv(path, columns: Sequence[str], rows: Sequence[Sequence], header: Optional[str] = None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_results(result: ProtocolResult, directory, header: Optional[str] = None) -> list:
    """``results.csv``, ``confusion_<model>.csv`` (row-normalized) and ``audit.json``."""
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = [(m, f.fold, f.balanced_acc, f.macro_f1) for m in result.models for f in result.folds[m]]
    paths = [directory / "results.csv"]
    write_csv(paths[0], ("model", "fold_subject", "balanced_acc", "macro_f1"), rows, header)
    for m in result.models:
        C = result.confusion(m, normalize=True)
        p = directory / f"confusion_{m}.csv"
        write_csv(p, ["true"] + [f"pred_{j}" for j in range(C.shape[1])],
                  [[i] + list(C[i]) for i in range(C.shape[0])], header)
        paths.append(p)
    audit = {"header": header, "verdicts": [v.to_dict() for v in result.verdicts], **result.trail.to_dict()}
    p = directory / "audit.json"
    p.write_text(json.dumps(audit, indent=1, sort_keys=True, default=str) + "\n")
    paths.append(p)
    return paths
