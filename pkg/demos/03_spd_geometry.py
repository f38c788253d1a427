"""Covariance geometry in a few lines.

Subject-specific channel gains move every covariance of that subject the
same way.  Re-centering each subject at the identity (Euclidean alignment)
removes the shift; the affine-invariant distance ignores it altogether.
"""
# %%
import numpy as np

from vowelbench.riemann import (
    align_by_subject,
    congruence,
    geometric_mean,
    lw_covariance,
    riemann_distance,
    tangent_embed,
)

rng = np.random.default_rng(3)
x = rng.normal(size=(30, 4, 300))
gain = np.diag([1.0, 4.0, 0.5, 2.0])
covs = np.concatenate([lw_covariance(x), lw_covariance(gain @ x)])
subjects = np.array(["S01"] * 30 + ["S02"] * 30)

# %%
A, B = covs[0], covs[1]
print("distance           ", riemann_distance(A, B))
print("after congruence   ", riemann_distance(congruence(gain, A), congruence(gain, B)))

# %%
G1, G2 = geometric_mean(covs[:30]), geometric_mean(covs[30:])
print("subject means apart by", riemann_distance(G1, G2))
aligned, refs = align_by_subject(covs, subjects)
print("after alignment     ", riemann_distance(geometric_mean(aligned[:30]), geometric_mean(aligned[30:])))

# %%
# Tangent vectors at the identity are ordinary feature vectors whose length
# is the geodesic distance to the reference.
v = tangent_embed(aligned[0], np.eye(4))
print(v.shape, np.linalg.norm(v), riemann_distance(np.eye(4), aligned[0]))
