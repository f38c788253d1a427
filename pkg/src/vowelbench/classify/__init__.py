"""Classifiers with a shared fit / predict_proba contract and ensemble combiners."""
from .gbdt import BinMapper, GradientBoostedTrees
from .models import (
    KINDS,
    ClassifierSpec,
    ShrinkageLDA,
    StackingModel,
    StratificationError,
    feature_importance,
    fit,
    lda_shrinkage_fit,
    make_model,
    soft_vote,
    stacking,
    stratified_folds,
)

__all__ = [
    "KINDS", "BinMapper", "GradientBoostedTrees", "ClassifierSpec", "ShrinkageLDA",
    "StackingModel", "StratificationError", "feature_importance", "fit",
    "lda_shrinkage_fit", "make_model", "soft_vote", "stacking", "stratified_folds",
]
