"""What the leakage audit catches.

A pipeline that fits its normalizer on the whole dataset (held-out subject
included) looks harmless and can inflate accuracy.  The audit trail records
the subjects each fit saw, so the run is flagged with a witness.
"""
# %%
import numpy as np

from vowelbench import harness, synth
from vowelbench.classify import ClassifierSpec
from vowelbench.preprocess import fit_normalizer

epochs = synth.generate(synth.SynthSpec(n_subjects=4, trials_per_class=8, n_channels=6, seed=2))
lda = ClassifierSpec("lda_shrinkage")


class GlobalNormalizer(harness.FeaturePipeline):
    """Normalizes with statistics from every subject: a leak."""

    def fit_normalizer(self, train, ctx):
        return fit_normalizer(ctx.full)


# %%
clean = harness.loso(epochs, harness.FeaturePipeline(lda, ("de",), name="clean"))
leaky = harness.loso(epochs, GlobalNormalizer(lda, ("de",), name="leaky"))
print("clean run passes:", clean.passed)
print("leaky run passes:", leaky.passed)

# %%
for v in leaky.verdicts:
    if not v.passed:
        print(v.checkpoint)
        print("  operation:", v.witness["record"]["operation"])
        print("  held-out subjects in the fit:", v.witness["outside_training"])

# %%
# Putting held-out trials into the training indices trips a different check.
folds = [(sid, np.concatenate([tr, te[:4]]), te) for sid, tr, te in harness.loso_folds(epochs)]
mixed = harness.loso(epochs, harness.FeaturePipeline(lda, ("de",)), folds=folds)
print([v.checkpoint for v in mixed.verdicts if not v.passed])

# %%
# strict=True turns any failed checkpoint into an exception.
try:
    harness.loso(epochs, GlobalNormalizer(lda, ("de",)), strict=True)
except harness.AuditError as err:
    print("AuditError:", err)
