"""Hand-crafted epoch features and train-scoped PCA.

Four families are computed per channel: log band power (Welch), band
differential entropy, Hjorth parameters and six temporal statistics.  With
61 channels and 5 bands the concatenation has 305 + 305 + 183 + 366 = 1159
columns.  Every column carries a registry entry ``(family, channel, tag)``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import signal

from .epochs import EpochSet
from .preprocess import zero_phase

logger = logging.getLogger(__name__)

VAR_EPS = 1e-12


class BandSpec(NamedTuple):
    name: str
    lo: float
    hi: float


BANDS = (
    BandSpec("delta", 0.5, 4.0),
    BandSpec("theta", 4.0, 8.0),
    BandSpec("alpha", 8.0, 13.0),
    BandSpec("beta", 13.0, 30.0),
    BandSpec("gamma", 30.0, 40.0),
)

HJORTH = ("activity", "mobility", "complexity")
TEMPORAL = ("mean", "variance", "skewness", "kurtosis", "max", "min")
FAMILIES = ("bandpower", "de", "hjorth", "temporal")


class FeatureColumn(NamedTuple):
    family: str
    channel: str
    tag: str

    def __str__(self):
        return f"{self.family}:{self.channel}:{self.tag}"


@dataclass
class FeatureMatrix:
    values: np.ndarray
    registry: list
    subjects: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("feature values must be 2-D (trials, features)")
        if len(self.registry) != self.values.shape[1]:
            raise ValueError(
                f"registry has {len(self.registry)} entries for {self.values.shape[1]} columns"
            )
        if self.subjects is not None:
            self.subjects = np.asarray(self.subjects).astype(str)

    @property
    def shape(self):
        return self.values.shape

    def families(self) -> list:
        return [c.family for c in self.registry]

    def columns(self, family: str) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.registry) if c.family == family], dtype=int)

    def select_rows(self, index) -> "FeatureMatrix":
        subjects = None if self.subjects is None else self.subjects[index]
        return FeatureMatrix(self.values[index], self.registry, subjects)

    def to_csv(self, path, header_line: Optional[str] = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_line:
                fh.write(header_line.rstrip("\n") + "\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([str(c) for c in self.registry])
            for row in self.values:
                writer.writerow([f"{v:.9g}" for v in row])


def _check_bands(bands: Sequence[BandSpec], fs: float):
    for b in bands:
        if not 0 < b.lo < b.hi:
            raise ValueError(f"invalid band {b}")
        if b.hi > fs / 2:
            raise ValueError(f"band {b.name} ({b.hi} Hz) lies above Nyquist ({fs / 2} Hz)")


def _registry(family: str, channels: Sequence[str], tags: Sequence[str]) -> list:
    return [FeatureColumn(family, ch, tag) for ch in channels for tag in tags]


def band_integral(freqs: np.ndarray, psd: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Integrate ``psd`` (last axis over ``freqs``) across ``[lo, hi]`` by the
    trapezoid rule, interpolating the PSD at the band edges."""
    def at(f):
        j = int(np.clip(np.searchsorted(freqs, f, side="right") - 1, 0, len(freqs) - 2))
        w = (f - freqs[j]) / (freqs[j + 1] - freqs[j])
        return psd[..., j] * (1 - w) + psd[..., j + 1] * w

    inner = (freqs > lo) & (freqs < hi)
    grid = np.concatenate([[lo], freqs[inner], [hi]])
    vals = np.concatenate([at(lo)[..., None], psd[..., inner], at(hi)[..., None]], axis=-1)
    return np.trapezoid(vals, grid, axis=-1)


def band_power(epochs: EpochSet, bands: Sequence[BandSpec] = BANDS, nperseg: int = 128) -> FeatureMatrix:
    """Natural log of the Welch power integrated over each band."""
    _check_bands(bands, epochs.fs)
    nper = min(nperseg, epochs.n_samples)
    freqs, psd = signal.welch(epochs.data, fs=epochs.fs, window="hann", nperseg=nper,
                              noverlap=nper // 2, axis=-1)
    power = np.stack([band_integral(freqs, psd, b.lo, b.hi) for b in bands], axis=-1)
    values = np.log(np.maximum(power, VAR_EPS)).reshape(epochs.n_trials, -1)
    return FeatureMatrix(values, _registry("bandpower", epochs.channel_names, [b.name for b in bands]),
                         epochs.subjects)


def entropy_from_variance(var: np.ndarray) -> np.ndarray:
    """Gaussian differential entropy 0.5 * ln(2 pi e var); ``var`` clamped at eps."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        logger.debug("clamping %d non-positive band variances", int((var <= 0).sum()))
    return 0.5 * np.log(2 * np.pi * np.e * np.maximum(var, VAR_EPS))


def zero_phase_band(lo: float, hi: float, fs: float, order: int = 4) -> np.ndarray:
    """Butterworth sections whose forward-backward response is -3 dB at ``lo`` and ``hi``.

    Two passes square the magnitude, so nominal cutoffs would put the band
    edges at -6 dB and shrink the noise bandwidth by about 10%.  The edges
    are widened in the bilinear-warped domain keeping the geometric centre.
    """
    c = (np.sqrt(2.0) - 1.0) ** (1.0 / (2 * order))
    warp = lambda f: np.tan(np.pi * f / fs)
    unwarp = lambda w: np.arctan(w) * fs / np.pi
    wl, wh = warp(lo), warp(hi)
    if hi >= fs / 2:
        return signal.butter(order, unwarp(wl * c), btype="highpass", fs=fs, output="sos")
    bw, centre2 = (wh - wl) / c, wl * wh
    wl2 = (-bw + np.sqrt(bw * bw + 4 * centre2)) / 2
    wh2 = wl2 + bw
    if unwarp(wh2) >= fs / 2 * 0.999:
        return signal.butter(order, unwarp(wl * c), btype="highpass", fs=fs, output="sos")
    return signal.butter(order, [unwarp(wl2), unwarp(wh2)], btype="bandpass", fs=fs, output="sos")


def band_variance(epochs: EpochSet, bands: Sequence[BandSpec] = BANDS, order: int = 4) -> np.ndarray:
    """Variance of each zero-phase band-filtered copy, shape (trials, channels, bands)."""
    _check_bands(bands, epochs.fs)
    out = np.empty((epochs.n_trials, epochs.n_channels, len(bands)))
    for j, b in enumerate(bands):
        sos = zero_phase_band(b.lo, b.hi, epochs.fs, order)
        out[..., j] = zero_phase(sos, epochs.data).var(axis=-1)
    return out


def differential_entropy(epochs: EpochSet, bands: Sequence[BandSpec] = BANDS, order: int = 4) -> FeatureMatrix:
    values = entropy_from_variance(band_variance(epochs, bands, order)).reshape(epochs.n_trials, -1)
    return FeatureMatrix(values, _registry("de", epochs.channel_names, [b.name for b in bands]),
                         epochs.subjects)


def hjorth_parameters(x: np.ndarray) -> np.ndarray:
    """Activity, mobility and complexity along the last axis (stacked last)."""
    if x.shape[-1] < 3:
        raise ValueError("Hjorth parameters need at least 3 samples")
    dx = np.diff(x, axis=-1)
    ddx = np.diff(dx, axis=-1)
    v0, v1, v2 = x.var(axis=-1), dx.var(axis=-1), ddx.var(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        mob = np.where(v0 > 0, np.sqrt(v1 / v0), 0.0)
        mob_d = np.where(v1 > 0, np.sqrt(v2 / v1), 0.0)
        comp = np.where(mob > 0, mob_d / mob, 0.0)
    return np.stack([v0, mob, comp], axis=-1)


def hjorth(epochs: EpochSet) -> FeatureMatrix:
    values = hjorth_parameters(epochs.data).reshape(epochs.n_trials, -1)
    return FeatureMatrix(values, _registry("hjorth", epochs.channel_names, HJORTH), epochs.subjects)


def moment_statistics(x: np.ndarray) -> np.ndarray:
    """Mean, variance, skewness, excess kurtosis, max, min (population moments)."""
    if x.shape[-1] < 4:
        raise ValueError("temporal statistics need at least 4 samples")
    mean = x.mean(axis=-1)
    centred = x - mean[..., None]
    sq = centred * centred
    m2 = sq.mean(axis=-1)
    m3 = (sq * centred).mean(axis=-1)
    m4 = (sq * sq).mean(axis=-1)
    ok = m2 > VAR_EPS * np.maximum(1.0, mean ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        skew = np.where(ok, m3 / m2 ** 1.5, 0.0)
        kurt = np.where(ok, m4 / m2 ** 2 - 3.0, 0.0)
    return np.stack([mean, m2, skew, kurt, x.max(axis=-1), x.min(axis=-1)], axis=-1)


def temporal_stats(epochs: EpochSet) -> FeatureMatrix:
    values = moment_statistics(epochs.data).reshape(epochs.n_trials, -1)
    return FeatureMatrix(values, _registry("temporal", epochs.channel_names, TEMPORAL), epochs.subjects)


def concat_features(parts: Sequence[FeatureMatrix]) -> FeatureMatrix:
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to concatenate")
    n = parts[0].values.shape[0]
    for p in parts:
        if p.values.shape[0] != n:
            raise ValueError("feature matrices differ in trial count")
        if len(p.registry) != p.values.shape[1]:
            raise ValueError("registry does not match column count")
    if len(parts) == 1:
        return parts[0]
    registry = [c for p in parts for c in p.registry]
    return FeatureMatrix(np.hstack([p.values for p in parts]), registry, parts[0].subjects)


EXTRACTORS = {
    "bandpower": band_power,
    "de": differential_entropy,
    "hjorth": hjorth,
    "temporal": temporal_stats,
}


def extract(epochs: EpochSet, families: Sequence[str] = FAMILIES, bands: Sequence[BandSpec] = BANDS) -> FeatureMatrix:
    """Concatenate the requested families in canonical order."""
    unknown = set(families) - set(EXTRACTORS)
    if unknown:
        raise ValueError(f"unknown feature families {sorted(unknown)}")
    parts = []
    for fam in FAMILIES:
        if fam not in families:
            continue
        if fam in ("bandpower", "de"):
            parts.append(EXTRACTORS[fam](epochs, bands))
        else:
            parts.append(EXTRACTORS[fam](epochs))
    return concat_features(parts)


# ---------------------------------------------------------------- PCA

@dataclass(frozen=True)
class PcaModel:
    components: np.ndarray          # D x k, orthonormal columns
    mean: np.ndarray
    explained_variance_ratio: np.ndarray
    fit_scope: str
    subjects: tuple = field(default=())

    @property
    def k(self) -> int:
        return self.components.shape[1]


def fit_pca(train: FeatureMatrix, k: int, fit_scope: Optional[str] = None) -> PcaModel:
    """Principal axes of the mean-centred training matrix via SVD (no whitening)."""
    X = train.values
    n, d = X.shape
    if not 1 <= k <= min(n - 1, d):
        raise ValueError(f"k={k} outside [1, min(n-1, D)] = [1, {min(n - 1, d)}]")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:k].T
    # deterministic sign: largest-magnitude loading positive
    flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(k)])
    comps = comps * np.where(flip == 0, 1.0, flip)
    var = s ** 2
    ratio = var[:k] / var.sum() if var.sum() > 0 else np.zeros(k)
    subjects = tuple(sorted(set(train.subjects.tolist()))) if train.subjects is not None else ()
    return PcaModel(comps, mean, ratio, fit_scope or "subjects=" + ",".join(subjects), subjects)


def apply_pca(model: PcaModel, fm: FeatureMatrix) -> FeatureMatrix:
    if fm.values.shape[1] != model.mean.shape[0]:
        raise ValueError("feature dimension does not match the PCA model")
    values = (fm.values - model.mean) @ model.components
    registry = [FeatureColumn("pca", "*", f"pc{i + 1}") for i in range(model.k)]
    return FeatureMatrix(values, registry, fm.subjects)


def reconstruct_pca(model: PcaModel, projected: FeatureMatrix) -> np.ndarray:
    return projected.values @ model.components.T + model.mean


def channel_groups(registry: Sequence[FeatureColumn]) -> dict:
    """Map channel name -> column indices (handcrafted families only)."""
    groups = {}
    for i, col in enumerate(registry):
        if col.family in FAMILIES:
            groups.setdefault(col.channel, []).append(i)
    return groups
