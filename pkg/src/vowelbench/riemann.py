"""SPD-matrix machinery for covariance-based decoding.

All matrix functions accept a single ``(d, d)`` matrix or a stack
``(..., d, d)`` and go through a symmetric eigendecomposition.  Distances use
the affine-invariant metric ``||log(A^-1/2 B A^-1/2)||_F``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

SYM_TOL = 1e-9
ZERO_EPS = 1e-10


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(message)
        self.grad_norm = grad_norm


# ---------------------------------------------------------------- basics

def _check_symmetric(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.shape[-1] != A.shape[-2]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    scale = np.maximum(np.abs(A).max(axis=(-2, -1), keepdims=True), 1.0)
    if np.any(np.abs(A - np.swapaxes(A, -1, -2)) > SYM_TOL * scale):
        raise ValueError("matrix is not symmetric")
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _eig_apply(A: np.ndarray, fn, require_pd: bool = True) -> np.ndarray:
    A = _check_symmetric(A)
    w, V = np.linalg.eigh(A)
    if require_pd and np.any(w <= 0):
        raise ValueError("matrix is not positive definite")
    return (V * fn(w)[..., None, :]) @ np.swapaxes(V, -1, -2)


def is_spd(A: np.ndarray, tol: float = SYM_TOL) -> bool:
    A = np.asarray(A, dtype=np.float64)
    if A.shape[-1] != A.shape[-2]:
        return False
    scale = np.maximum(np.abs(A).max(), 1.0)
    if np.any(np.abs(A - np.swapaxes(A, -1, -2)) > tol * scale):
        return False
    return bool(np.all(np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2))) > 0))


def spd_log(A):
    return _eig_apply(A, np.log)


def spd_exp(S):
    return _eig_apply(S, np.exp, require_pd=False)


def spd_sqrt(A):
    return _eig_apply(A, np.sqrt)


def spd_invsqrt(A):
    return _eig_apply(A, lambda w: 1.0 / np.sqrt(w))


def spd_inv(A):
    return _eig_apply(A, lambda w: 1.0 / w)


def congruence(W: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``W A W^T`` broadcast over stacks of ``A``."""
    return W @ A @ np.swapaxes(W, -1, -2)


# ---------------------------------------------------------------- covariance

def lw_shrinkage(X: np.ndarray):
    """Ledoit-Wolf shrinkage of centred observations.

    ``X`` has shape ``(..., d, n)`` (channels x samples).  Returns the sample
    covariance ``S``, the target scale ``tr(S)/d`` and the intensity in [0, 1].
    """
    X = np.asarray(X, dtype=np.float64)
    d, n = X.shape[-2:]
    Xc = X - X.mean(axis=-1, keepdims=True)
    S = Xc @ np.swapaxes(Xc, -1, -2) / n
    mu = np.trace(S, axis1=-2, axis2=-1) / d
    eye = np.eye(d)
    delta2 = ((S - mu[..., None, None] * eye) ** 2).sum(axis=(-2, -1)) / d
    # sum_k ||x_k x_k^T - S||_F^2 = sum_k ||x_k||^4 - n ||S||_F^2
    norms4 = ((Xc ** 2).sum(axis=-2) ** 2).sum(axis=-1)
    beta_bar2 = (norms4 / n - (S ** 2).sum(axis=(-2, -1))) / (n * d)
    beta2 = np.minimum(np.maximum(beta_bar2, 0.0), delta2)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(delta2 > 0, beta2 / delta2, 1.0)
    return S, mu, np.clip(lam, 0.0, 1.0)


def lw_covariance(epoch: np.ndarray) -> np.ndarray:
    """Ledoit-Wolf covariance of a (channels x samples) epoch or a stack of them.

    The output is strictly positive definite: if the optimal intensity leaves
    a singular matrix (e.g. two samples), the intensity is raised just enough
    to lift the smallest eigenvalue to ``1e-10 * tr(S)/d``.
    """
    epoch = np.asarray(epoch, dtype=np.float64)
    d, n = epoch.shape[-2:]
    if n == 1:
        mu = (epoch[..., 0] ** 2).mean(axis=-1)
        S, lam = np.zeros(epoch.shape[:-1] + (d,)), np.ones_like(mu)
    else:
        S, mu, lam = lw_shrinkage(epoch)
    zero = mu <= 0
    if np.any(zero):
        logger.warning("%d all-zero epochs: covariance set to eps*I", int(np.sum(zero)))
    mu_safe = np.where(zero, ZERO_EPS, mu)
    smin = np.linalg.eigvalsh(S)[..., 0] if n > 1 else np.zeros_like(mu)
    # (1-l)*smin + l*mu >= floor*mu
    floor = 1e-10
    need = np.where(mu_safe - smin > 0, (floor * mu_safe - smin) / (mu_safe - smin), 0.0)
    lam = np.where(zero, 1.0, np.maximum(lam, np.clip(need, 0.0, 1.0)))
    C = (1 - lam)[..., None, None] * S + (lam * mu_safe)[..., None, None] * np.eye(d)
    return 0.5 * (C + np.swapaxes(C, -1, -2))


def sample_covariance(epoch: np.ndarray) -> np.ndarray:
    X = np.asarray(epoch, dtype=np.float64)
    Xc = X - X.mean(axis=-1, keepdims=True)
    return Xc @ np.swapaxes(Xc, -1, -2) / X.shape[-1]


# ---------------------------------------------------------------- metric

def riemann_distance(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Affine-invariant distance; broadcasts over leading axes."""
    A = _check_symmetric(A)
    B = _check_symmetric(B)
    if A.shape[-1] != B.shape[-1]:
        raise ValueError("dimension mismatch")
    W = spd_invsqrt(A)
    w = np.linalg.eigvalsh(congruence(W, B))
    if np.any(w <= 0):
        raise ValueError("matrix is not positive definite")
    return np.sqrt((np.log(w) ** 2).sum(axis=-1))


def geometric_mean(covs: np.ndarray, tol: float = 1e-8, max_iter: int = 50,
                   init: Optional[np.ndarray] = None, weights: Optional[np.ndarray] = None,
                   strict: bool = True) -> np.ndarray:
    """Karcher mean under the affine-invariant metric (unit-step fixed point).

    With ``strict=False`` a non-converged iterate is returned with a warning
    instead of raising :class:`ConvergenceError`.
    """
    covs = _check_symmetric(np.asarray(covs, dtype=np.float64))
    if covs.ndim == 2:
        covs = covs[None]
    if covs.shape[0] == 0:
        raise ValueError("geometric mean of an empty set")
    if weights is None:
        weights = np.full(covs.shape[0], 1.0 / covs.shape[0])
    else:
        weights = np.asarray(weights, dtype=np.float64) / np.sum(weights)
    G = np.einsum("i,ijk->jk", weights, covs) if init is None else np.asarray(init, dtype=np.float64)
    grad_norm = np.inf
    for _ in range(max_iter):
        G_half = spd_sqrt(G)
        G_ihalf = spd_invsqrt(G)
        T = np.einsum("i,ijk->jk", weights, spd_log(congruence(G_ihalf, covs)))
        grad_norm = float(np.linalg.norm(T))
        if grad_norm < tol:
            return G
        G = congruence(G_half, spd_exp(T))
        G = 0.5 * (G + G.T)
    # last step may have landed within tolerance
    T = np.einsum("i,ijk->jk", weights, spd_log(congruence(spd_invsqrt(G), covs)))
    grad_norm = float(np.linalg.norm(T))
    if grad_norm < tol:
        return G
    if not strict:
        logger.warning("Karcher mean stopped after %d iterations (gradient norm %.3e)", max_iter, grad_norm)
        return G
    raise ConvergenceError(f"Karcher mean did not converge in {max_iter} iterations "
                           f"(gradient norm {grad_norm:.3e})", grad_norm)


# ---------------------------------------------------------------- tangent space

def upper_vectorize(S: np.ndarray) -> np.ndarray:
    """Upper triangle (row-major) with off-diagonals scaled by sqrt(2)."""
    d = S.shape[-1]
    iu = np.triu_indices(d)
    coef = np.where(iu[0] == iu[1], 1.0, np.sqrt(2.0))
    return S[..., iu[0], iu[1]] * coef


def upper_unvectorize(v: np.ndarray, d: Optional[int] = None) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if d is None:
        d = int(round((np.sqrt(8 * v.shape[-1] + 1) - 1) / 2))
    if d * (d + 1) // 2 != v.shape[-1]:
        raise ValueError("vector length is not d(d+1)/2")
    iu = np.triu_indices(d)
    coef = np.where(iu[0] == iu[1], 1.0, 1.0 / np.sqrt(2.0))
    S = np.zeros(v.shape[:-1] + (d, d))
    S[..., iu[0], iu[1]] = v * coef
    S[..., iu[1], iu[0]] = v * coef
    return S


def tangent_embed(C: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Norm-preserving tangent vector of ``C`` at reference ``G``."""
    C = np.asarray(C, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if C.shape[-1] != G.shape[-1]:
        raise ValueError("dimension mismatch")
    return upper_vectorize(spd_log(congruence(spd_invsqrt(G), C)))


def tangent_unembed(v: np.ndarray, G: np.ndarray) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    S = upper_unvectorize(v, G.shape[-1])
    return congruence(spd_sqrt(G), spd_exp(S))


# ---------------------------------------------------------------- alignment

def ea_reference(covs: np.ndarray) -> np.ndarray:
    covs = np.asarray(covs, dtype=np.float64)
    if covs.ndim == 2:
        covs = covs[None]
    if covs.shape[0] == 0:
        raise ValueError("alignment needs at least one trial")
    return covs.mean(axis=0)


def euclidean_align(covs: np.ndarray, data: Optional[np.ndarray] = None):
    """Whiten one subject's trials by the inverse square root of their mean covariance.

    Returns ``(aligned_covs, aligned_data, reference)``; ``aligned_data`` is
    None when no epochs are passed.  The aligned covariances average to I.
    """
    R = ea_reference(covs)
    W = spd_invsqrt(R)
    aligned = congruence(W, np.asarray(covs, dtype=np.float64))
    aligned_data = None if data is None else W @ np.asarray(data, dtype=np.float64)
    return aligned, aligned_data, R


def align_by_subject(covs: np.ndarray, subjects: np.ndarray):
    """Euclidean alignment applied independently within each subject."""
    subjects = np.asarray(subjects).astype(str)
    out = np.empty_like(np.asarray(covs, dtype=np.float64))
    refs = {}
    for sid in sorted(set(subjects.tolist())):
        idx = np.flatnonzero(subjects == sid)
        out[idx], _, refs[sid] = euclidean_align(covs[idx])
    return out, refs


# ---------------------------------------------------------------- MDM

@dataclass
class MDM:
    """Minimum distance to per-class Karcher means."""

    means: Optional[np.ndarray] = None
    classes: Optional[np.ndarray] = None
    tol: float = 1e-8
    max_iter: int = 50
    strict: bool = True

    def fit(self, covs: np.ndarray, labels: np.ndarray, n_classes: Optional[int] = None) -> "MDM":
        labels = np.asarray(labels)
        classes = np.arange(n_classes) if n_classes is not None else np.unique(labels)
        means = []
        for k in classes:
            members = covs[labels == k]
            if len(members) == 0:
                raise ValueError(f"class {k} has no training covariances")
            means.append(geometric_mean(members, self.tol, self.max_iter, strict=self.strict))
        self.means = np.stack(means)
        self.classes = np.asarray(classes)
        return self

    def distances(self, covs: np.ndarray) -> np.ndarray:
        covs = np.asarray(covs, dtype=np.float64)
        if covs.ndim == 2:
            covs = covs[None]
        return np.stack([riemann_distance(M, covs) for M in self.means], axis=-1)

    def predict(self, covs: np.ndarray):
        """Predicted labels and the distance rows; ties go to the lowest class index."""
        dist = self.distances(covs)
        best = dist.min(axis=-1, keepdims=True)
        tie = dist <= best + 1e-12 * (1.0 + best)
        return self.classes[np.argmax(tie, axis=-1)], dist

    def predict_proba(self, covs: np.ndarray) -> np.ndarray:
        d2 = self.distances(covs) ** 2
        z = -(d2 - d2.min(axis=-1, keepdims=True))
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)
