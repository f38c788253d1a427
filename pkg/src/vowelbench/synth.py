"""Synthetic EEG epochs with plantable class structure.

Background activity is a mix of pink (1/f power) and white Gaussian noise.
Class information can be planted as

``band``
    alpha-band amplitude of class ``k`` scaled by ``1 + k * snr`` on the
    plant channels;
``channel``
    the same band plant confined to a single channel (the first plant
    channel);
``erp``
    a class-specific spatial pattern times a Hann bump inside
    ``erp_window`` (use a long window for a sustained code);
``none``
    labels independent of the data.

Per-subject channel gains are log-normal.  Every subject draws from its own
seeded stream, so generation order never changes the output.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .epochs import VOWELS, EpochSet
from .ingest import Recording, write_edf_file

PLANTS = ("none", "band", "channel", "erp")

CHANNELS_61 = (
    "Fp1", "Fpz", "Fp2",
    "AF7", "AF3", "AFz", "AF4", "AF8",
    "F7", "F5", "F3", "F1", "Fz", "F2", "F4", "F6", "F8",
    "FT7", "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "FT8",
    "T7", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "T8",
    "TP7", "CP5", "CP3", "CP1", "CPz", "CP2", "CP4", "CP6", "TP8",
    "P7", "P5", "P3", "P1", "Pz", "P2", "P4", "P6", "P8",
    "PO7", "PO3", "POz", "PO4", "PO8",
    "O1", "Oz", "O2",
)

ARTIFACT_UV = 500.0


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 16
    trials_per_class: int = 20
    n_classes: int = 5
    n_channels: int = 61
    channel_names: Optional[tuple] = None
    fs: float = 256.0
    tmin: float = -0.2
    tmax: float = 1.0
    noise_uv: float = 10.0
    pink_fraction: float = 0.7
    plant: str = "none"
    snr: float = 0.0
    plant_channels: tuple = (0, 1, 2, 3, 4, 5, 6, 7)
    band: tuple = (8.0, 13.0)
    erp_window: tuple = (0.1, 0.2)
    subject_gain_sigma: float = 0.1
    jitter_s: float = 0.0
    artifact_trials: tuple = ()
    isi_s: float = 0.3
    seed: int = 42

    def __post_init__(self):
        if self.snr < 0:
            raise ValueError("snr must be non-negative")
        if self.trials_per_class < 1 or self.n_subjects < 1:
            raise ValueError("need at least one subject and one trial per class")
        if self.n_classes < 2 or self.n_classes > len(VOWELS):
            raise ValueError(f"n_classes must lie in 2..{len(VOWELS)}")
        if self.plant not in PLANTS:
            raise ValueError(f"plant must be one of {PLANTS}")
        if not 0.0 <= self.pink_fraction <= 1.0:
            raise ValueError("pink_fraction must lie in [0, 1]")
        if self.tmax <= self.tmin:
            raise ValueError("tmax must exceed tmin")
        if self.channel_names is not None and len(self.channel_names) != self.n_channels:
            raise ValueError("channel_names length must equal n_channels")
        if self.plant != "none" and any(not 0 <= c < self.n_channels for c in self.plant_channels):
            raise ValueError("plant channel index out of range")
        lo, hi = self.band
        if not 0 < lo < hi <= self.fs / 2:
            raise ValueError("plant band must lie inside (0, Nyquist]")

    @property
    def n_samples(self) -> int:
        return int(round((self.tmax - self.tmin) * self.fs))

    @property
    def names(self) -> tuple:
        if self.channel_names is not None:
            return tuple(self.channel_names)
        if self.n_channels <= len(CHANNELS_61):
            return CHANNELS_61[: self.n_channels]
        return tuple(f"E{i + 1:03d}" for i in range(self.n_channels))

    @property
    def subject_ids(self) -> list:
        return [f"S{i + 1:02d}" for i in range(self.n_subjects)]

    def to_dict(self) -> dict:
        return asdict(self)


def colored_noise(rng: np.random.Generator, shape, fs: float, pink_fraction: float = 0.7) -> np.ndarray:
    """Unit-variance mix of pink (power ~ 1/f) and white noise along the last axis."""
    n = shape[-1]
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    shaping = np.zeros_like(f)
    shaping[1:] = 1.0 / np.sqrt(f[1:])
    pink = np.fft.irfft(spec * shaping, n=n, axis=-1)
    pink /= pink.std(axis=-1, keepdims=True)
    mix = np.sqrt(pink_fraction) * pink + np.sqrt(1.0 - pink_fraction) * white
    return mix


def scale_band(x: np.ndarray, fs: float, band, gain: np.ndarray) -> np.ndarray:
    """Multiply the ``band`` Fourier components of ``x`` by ``gain`` (per leading row)."""
    n = x.shape[-1]
    spec = np.fft.rfft(x, axis=-1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    inband = (f >= band[0]) & (f <= band[1])
    spec[..., inband] *= np.asarray(gain)[..., None]
    return np.fft.irfft(spec, n=n, axis=-1)


def class_patterns(spec: SynthSpec) -> np.ndarray:
    """Fixed class x plant-channel sign patterns for the ERP plant (zero-mean over classes)."""
    rng = np.random.default_rng([spec.seed, 999_983])
    P = rng.choice([-1.0, 1.0], size=(spec.n_classes, len(spec.plant_channels)))
    return P - P.mean(axis=0, keepdims=True)


def _hann_bump(times, window, shift=0.0):
    lo, hi = window[0] + shift, window[1] + shift
    inside = (times >= lo) & (times <= hi)
    out = np.zeros_like(times)
    if hi > lo:
        out[inside] = np.sin(np.pi * (times[inside] - lo) / (hi - lo)) ** 2
    return out


def _artifact(times, n_channels):
    spike = ARTIFACT_UV * np.exp(-0.5 * ((times - 0.5) / 0.02) ** 2)
    signs = np.where(np.arange(n_channels) % 2 == 0, 1.0, -1.0)
    return signs[:, None] * spike[None, :]


def _subject_trials(spec: SynthSpec, s: int):
    rng = np.random.default_rng([spec.seed, s])
    K, T, C = spec.n_classes, spec.trials_per_class, spec.n_channels
    labels = np.repeat(np.arange(K), T)
    labels = labels[rng.permutation(labels.size)]
    n = spec.n_samples
    times = (round(spec.tmin * spec.fs) + np.arange(n)) / spec.fs
    x = colored_noise(rng, (labels.size, C, n), spec.fs, spec.pink_fraction)
    chans = np.asarray(spec.plant_channels[:1] if spec.plant == "channel" else spec.plant_channels)
    if spec.plant in ("band", "channel") and spec.snr > 0:
        gain = 1.0 + labels * spec.snr
        x[:, chans] = scale_band(x[:, chans], spec.fs, spec.band, gain[:, None])
    elif spec.plant == "erp" and spec.snr > 0:
        patterns = class_patterns(spec)
        shifts = rng.normal(0.0, spec.jitter_s, size=labels.size) if spec.jitter_s > 0 else np.zeros(labels.size)
        for i, k in enumerate(labels):
            x[i, chans] += spec.snr * patterns[k][:, None] * _hann_bump(times, spec.erp_window, shifts[i])[None, :]
    gains = np.exp(rng.normal(0.0, spec.subject_gain_sigma, size=C)) if spec.subject_gain_sigma > 0 else np.ones(C)
    x *= spec.noise_uv * gains[None, :, None]
    return x, labels


def generate(spec: SynthSpec, return_truth: bool = False):
    """Epochs for every subject, plus an optional ground-truth descriptor.

    Trials within a subject are laid out back to back with ``isi_s`` gaps;
    ``onsets`` index those positions so the overlap audit has real metadata.
    ``artifact_trials`` are global trial indices that receive a 500 uV spike
    (alternating polarity across channels) at 0.5 s.
    """
    n = spec.n_samples
    spacing = n + int(round(spec.isi_s * spec.fs))
    lead = int(round(max(1.0, -spec.tmin + 0.5) * spec.fs))
    off = int(round(spec.tmin * spec.fs))
    parts = []
    for s, sid in enumerate(spec.subject_ids):
        x, y = _subject_trials(spec, s)
        onsets = lead - off + np.arange(y.size) * spacing
        parts.append(EpochSet(
            data=x, labels=y, subjects=np.array([sid] * y.size), fs=spec.fs,
            channel_names=spec.names, tmin=off / spec.fs, onsets=onsets,
            recordings=np.array([f"{sid}/run-1"] * y.size), history=("synth",),
        ))
    epochs = EpochSet.concatenate(parts)
    if spec.artifact_trials:
        data = epochs.data.copy()
        art = _artifact(epochs.times, spec.n_channels)
        for t in spec.artifact_trials:
            data[t] += art
        epochs = epochs.with_data(data)
    if not return_truth:
        return epochs
    truth = {
        "plant": spec.plant,
        "snr": spec.snr,
        "plant_channels": [spec.names[c] for c in
                           (spec.plant_channels[:1] if spec.plant == "channel" else spec.plant_channels)]
        if spec.plant != "none" else [],
        "band": list(spec.band),
        "erp_window": list(spec.erp_window),
        "artifact_trials": list(spec.artifact_trials),
    }
    if spec.plant == "erp":
        truth["patterns"] = class_patterns(spec).tolist()
    return epochs, truth


def continuous_recording(spec: SynthSpec, epochs: EpochSet, subject: str, record_s: float = 1.0) -> Recording:
    """Embed one subject's epochs in a continuous stream padded with fresh noise."""
    sub = epochs.select(np.flatnonzero(epochs.subjects == subject))
    n = sub.n_samples
    off = int(round(sub.tmin * sub.fs))
    last = int(sub.onsets.max()) + off + n
    tail = int(round(1.0 * sub.fs))
    spr = int(round(record_s * sub.fs))
    total = int(np.ceil((last + tail) / spr) * spr)
    rng = np.random.default_rng([spec.seed, 7_000_003, int(subject[1:])])
    gains = np.sqrt((sub.data ** 2).mean(axis=(0, 2)))
    samples = colored_noise(rng, (sub.n_channels, total), sub.fs, spec.pink_fraction) * gains[:, None]
    events = []
    for i in range(sub.n_trials):
        start = int(sub.onsets[i]) + off
        samples[:, start:start + n] = sub.data[i]
        events.append((int(sub.onsets[i]), VOWELS[int(sub.labels[i])]))
    return Recording(samples=samples, fs=sub.fs, channel_names=list(sub.channel_names), events=events)


def make_edf_fixture(spec: SynthSpec, root, task: str = "vowels") -> list:
    """Write one EDF+ file per subject under ``root/sub-XX/eeg/``.

    Returns the written paths.  Reading a file back and cutting windows at
    its annotations gives :func:`generate`'s epochs up to 16-bit quantisation.
    """
    root = Path(root)
    epochs = generate(spec)
    paths = []
    for sid in spec.subject_ids:
        rec = continuous_recording(spec, epochs, sid)
        num = sid[1:]
        path = root / f"sub-{num}" / "eeg" / f"sub-{num}_task-{task}_eeg.edf"
        paths.append(write_edf_file(rec, path))
    return paths


def label_map(n_classes: int = 5) -> dict:
    return {v: i for i, v in enumerate(VOWELS[:n_classes])}
