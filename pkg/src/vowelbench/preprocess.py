"""Preprocessing chain: re-reference, resample, band-pass, bad channels,
artifact rejection, epoching, baseline correction, train-scoped z-scoring.

Signal functions accept a bare array (channel axis -2, time axis -1), a
:class:`~vowelbench.ingest.Recording` or an :class:`~vowelbench.epochs.EpochSet`
and return the same kind of object.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import signal

from .epochs import EpochSet
from .ingest import Recording, epoch_from_events

logger = logging.getLogger(__name__)

PIPELINE_ORDER = (
    "rereference_average",
    "resample",
    "bandpass",
    "detect_bad_channels",
    "reject_artifacts",
    "epoch",
    "baseline_correct",
    "normalize",
)

DEFAULTS = {
    "bandpass.lo": 0.5,
    "bandpass.hi": 40.0,
    "bandpass.order": 4,
    "resample.fs": 256.0,
    "reject.p2p_uv": 400.0,
    "badchan.z": 3.0,
    "epoch.tmin": -0.2,
    "epoch.tmax": 1.0,
    "baseline.window": (-0.2, 0.0),
}

NORM_EPS = 1e-12


def _unwrap(obj):
    if isinstance(obj, Recording):
        return obj.samples, obj.fs
    if isinstance(obj, EpochSet):
        return obj.data, obj.fs
    return np.asarray(obj, dtype=np.float64), None


def _rewrap(obj, data, step, fs=None):
    if isinstance(obj, Recording):
        events = obj.events
        if fs is not None and fs != obj.fs:
            ratio = fs / obj.fs
            n = data.shape[-1]
            events = [(min(int(round(i * ratio)), n - 1), lab) for i, lab in obj.events]
        return Recording(samples=data, fs=fs or obj.fs, channel_names=obj.channel_names,
                         events=events)
    if isinstance(obj, EpochSet):
        changes = {}
        if fs is not None and fs != obj.fs:
            changes["fs"] = fs
            if obj.onsets is not None:
                changes["onsets"] = np.rint(obj.onsets * fs / obj.fs).astype(np.int64)
        return obj.with_data(data, step, **changes)
    return data


def _need_fs(fs, given):
    fs = fs if fs is not None else given
    if fs is None:
        raise ValueError("sampling rate required for bare arrays")
    return float(fs)


# ---------------------------------------------------------------- steps 1-3

def rereference_average(obj):
    """Subtract the across-channel mean at every sample."""
    data, _ = _unwrap(obj)
    if data.shape[-2] < 2:
        raise ValueError("average reference needs at least two channels")
    out = data - data.mean(axis=-2, keepdims=True)
    return _rewrap(obj, out, "rereference_average")


def butter_bandpass(lo: float, hi: float, fs: float, order: int = 4) -> np.ndarray:
    if lo <= 0:
        raise ValueError("low cutoff must be positive")
    if hi >= fs / 2:
        raise ValueError(f"high cutoff {hi} Hz must lie below Nyquist ({fs / 2} Hz)")
    if lo >= hi:
        raise ValueError("low cutoff must be below high cutoff")
    return signal.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")


def zero_phase(sos: np.ndarray, data: np.ndarray) -> np.ndarray:
    """Forward-backward filtering with odd reflection padding of 3x filter length."""
    ntaps = 2 * len(sos) + 1
    padlen = min(3 * ntaps, data.shape[-1] - 1)
    return signal.sosfiltfilt(sos, data, axis=-1, padtype="odd", padlen=padlen)


def bandpass(obj, lo: float = 0.5, hi: float = 40.0, order: int = 4, fs: Optional[float] = None):
    """Zero-phase Butterworth band-pass (effective magnitude is squared)."""
    data, own_fs = _unwrap(obj)
    fs = _need_fs(fs, own_fs)
    sos = butter_bandpass(lo, hi, fs, order)
    return _rewrap(obj, zero_phase(sos, data), "bandpass")


def resample(obj, target_fs: float = 256.0, fs: Optional[float] = None, beta: float = 8.6):
    """Polyphase rational resampling with a Kaiser-windowed sinc anti-alias filter."""
    data, own_fs = _unwrap(obj)
    fs = _need_fs(fs, own_fs)
    if target_fs <= 0:
        raise ValueError("target sampling rate must be positive")
    if target_fs > fs:
        raise ValueError("only downsampling is supported")
    n_out = int(round(data.shape[-1] * target_fs / fs))
    if target_fs == fs:
        out = data.copy()
    else:
        ratio = Fraction(target_fs / fs).limit_denominator(10000)
        out = signal.resample_poly(data, ratio.numerator, ratio.denominator, axis=-1,
                                   window=("kaiser", beta))
        if out.shape[-1] < n_out:
            pad = [(0, 0)] * (out.ndim - 1) + [(0, n_out - out.shape[-1])]
            out = np.pad(out, pad, mode="edge")
        out = out[..., :n_out]
    return _rewrap(obj, out, "resample", fs=float(target_fs))


# ---------------------------------------------------------------- steps 4-5

def detect_bad_channels(obj, z_thresh: float = 3.0) -> np.ndarray:
    """Boolean mask of channels whose log-variance z-score exceeds ``z_thresh``.

    Variance is pooled over every axis except the channel axis (-2), so the
    same call works on continuous recordings and on epoch stacks.
    """
    data, _ = _unwrap(obj)
    n_ch = data.shape[-2]
    if n_ch < 2:
        raise ValueError("bad-channel detection needs at least two channels")
    moved = np.moveaxis(data, -2, 0).reshape(n_ch, -1)
    var = moved.var(axis=1)
    logv = np.log(np.maximum(var, np.finfo(float).tiny))
    spread = logv.std()
    if spread == 0:
        return np.zeros(n_ch, dtype=bool)
    z = (logv - logv.mean()) / spread
    mask = z > z_thresh
    if mask.all():
        logger.warning("all %d channels flagged as bad", n_ch)
    return mask


def zero_channels(obj, mask: np.ndarray):
    """Zero-fill flagged channels (no interpolation)."""
    data, _ = _unwrap(obj)
    out = data.copy()
    out[..., np.asarray(mask, dtype=bool), :] = 0.0
    return _rewrap(obj, out, "detect_bad_channels")


def peak_to_peak(epochs: EpochSet) -> np.ndarray:
    """Largest per-channel peak-to-peak amplitude of every trial."""
    if epochs.n_trials == 0:
        return np.zeros(0)
    return np.ptp(epochs.data, axis=-1).max(axis=-1)


def reject_artifacts(epochs: EpochSet, p2p_limit: float = 400.0) -> EpochSet:
    """Drop trials whose peak-to-peak amplitude exceeds ``p2p_limit`` on any channel."""
    keep = np.flatnonzero(peak_to_peak(epochs) <= p2p_limit)
    if keep.size == 0:
        raise ValueError("artifact rejection removed every trial")
    out = epochs.select(keep)
    return replace(out, history=out.history + ("reject_artifacts",))


# ---------------------------------------------------------------- step 7

def baseline_correct(epochs: EpochSet, window: Sequence[float] = (-0.2, 0.0)) -> EpochSet:
    """Subtract, per trial and channel, the mean over the baseline window (inclusive)."""
    t = epochs.times
    lo, hi = window
    half = 0.5 / epochs.fs
    if lo < t[0] - half or hi > t[-1] + half or lo >= hi:
        raise ValueError(f"baseline window {tuple(window)} outside epoch [{t[0]:.4f}, {t[-1]:.4f}] s")
    mask = (t >= lo - half) & (t <= hi + half)
    base = epochs.data[..., mask].mean(axis=-1, keepdims=True)
    return epochs.with_data(epochs.data - base, "baseline_correct")


# ---------------------------------------------------------------- step 8

@dataclass(frozen=True)
class Normalizer:
    """Per-channel z-score statistics fitted on one training fold."""

    mean: np.ndarray
    std: np.ndarray
    fit_scope: str
    subjects: tuple = ()
    clamped: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.fit_scope:
            raise ValueError("fit_scope must be non-empty")
        if np.any(self.std < 0):
            raise ValueError("negative standard deviation")


def fit_normalizer(train: EpochSet, fit_scope: Optional[str] = None) -> Normalizer:
    if train.n_trials == 0:
        raise ValueError("cannot fit a normalizer on an empty training set")
    mean = train.data.mean(axis=(0, 2))
    std = train.data.std(axis=(0, 2))
    clamped = std < NORM_EPS
    if clamped.any():
        logger.info("%d zero-variance channels clamped to eps", int(clamped.sum()))
    subjects = tuple(train.subject_ids())
    return Normalizer(
        mean=mean,
        std=np.where(clamped, NORM_EPS, std),
        fit_scope=fit_scope or "subjects=" + ",".join(subjects),
        subjects=subjects,
        clamped=clamped,
    )


def apply_normalizer(norm: Normalizer, epochs: EpochSet) -> EpochSet:
    if norm.mean.shape[0] != epochs.n_channels:
        raise ValueError("normalizer channel count does not match epochs")
    data = (epochs.data - norm.mean[None, :, None]) / norm.std[None, :, None]
    return epochs.with_data(data, "normalize")


# ---------------------------------------------------------------- chain

def preprocess_recording(rec: Recording, label_map: Mapping[str, int], params: Optional[Mapping] = None,
                         subject: str = "S00", recording_id: str = "run-1",
                         ignore_unmapped: bool = True) -> EpochSet:
    """Run steps 1-7 on one continuous recording and return clean epochs.

    Step 8 (normalization) is fold-dependent and belongs to the evaluation
    harness.  Windows that would spill past the recording edges are skipped.
    """
    p = dict(DEFAULTS)
    p.update(params or {})
    rec = rereference_average(rec)
    rec = resample(rec, p["resample.fs"])
    rec = bandpass(rec, p["bandpass.lo"], p["bandpass.hi"], int(p["bandpass.order"]))
    bad = detect_bad_channels(rec, p["badchan.z"])
    if bad.any():
        logger.info("%s: zero-filling bad channels %s", subject,
                    [c for c, b in zip(rec.channel_names, bad) if b])
    rec = zero_channels(rec, bad)

    tmin, tmax = p["epoch.tmin"], p["epoch.tmax"]
    n = int(round((tmax - tmin) * rec.fs))
    off = int(round(tmin * rec.fs))
    inside = [(i, lab) for i, lab in rec.events if i + off >= 0 and i + off + n <= rec.n_times]
    if len(inside) < len(rec.events):
        logger.warning("%s: %d events too close to the recording edge", subject,
                       len(rec.events) - len(inside))
    rec = Recording(samples=rec.samples, fs=rec.fs, channel_names=rec.channel_names, events=inside)
    epochs = epoch_from_events(rec, tmin, tmax, label_map, subject=subject,
                               recording_id=recording_id, ignore_unmapped=ignore_unmapped)
    if epochs.n_trials == 0:
        raise ValueError(f"{subject}: no epochs extracted")
    history = ("rereference_average", "resample", "bandpass", "detect_bad_channels")
    epochs = replace(epochs, history=history)
    epochs = reject_artifacts(epochs, p["reject.p2p_uv"])
    epochs = replace(epochs, history=epochs.history + ("epoch",))
    return baseline_correct(epochs, tuple(p["baseline.window"]))


def check_pipeline_order(history: Sequence[str]) -> Optional[str]:
    """Return None when ``history`` follows the canonical step order, else a message."""
    positions = []
    for step in history:
        if step not in PIPELINE_ORDER:
            continue
        positions.append(PIPELINE_ORDER.index(step))
    if positions != sorted(positions):
        return f"steps out of order: {list(history)}"
    return None
