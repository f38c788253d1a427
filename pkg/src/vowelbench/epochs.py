"""Epoch container shared by every stage of the benchmark."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

VOWELS = ("a", "e", "i", "o", "u")


@dataclass(frozen=True)
class EpochSet:
    """Trials x channels x samples tensor with per-trial labels and subjects.

    ``onsets`` (sample index of the stimulus in the continuous recording) and
    ``recordings`` (recording identifier per trial) are optional metadata used
    by the leakage audit to check that epochs never overlap.
    """

    data: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    fs: float
    channel_names: tuple
    tmin: float = -0.2
    onsets: Optional[np.ndarray] = None
    recordings: Optional[np.ndarray] = None
    history: tuple = field(default_factory=tuple)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"data must be 3-D (trials, channels, samples), got {data.shape}")
        labels = np.asarray(self.labels, dtype=np.int64)
        subjects = np.asarray(self.subjects).astype(str)
        n = data.shape[0]
        if labels.shape != (n,) or subjects.shape != (n,):
            raise ValueError("labels and subjects must have one entry per trial")
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if len(self.channel_names) != data.shape[1]:
            raise ValueError("channel_names length does not match channel axis")
        if n and not np.all(np.isfinite(data)):
            raise ValueError("epoch data contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        object.__setattr__(self, "history", tuple(self.history))
        for name in ("onsets", "recordings"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value)
                if value.shape != (n,):
                    raise ValueError(f"{name} must have one entry per trial")
                object.__setattr__(self, name, value)

    @property
    def n_trials(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.tmin + np.arange(self.n_samples) / self.fs

    def subject_ids(self) -> list:
        return sorted(set(self.subjects.tolist()))

    def select(self, index) -> "EpochSet":
        """Subset trials, keeping all metadata in lockstep."""
        index = np.asarray(index)
        return replace(
            self,
            data=self.data[index],
            labels=self.labels[index],
            subjects=self.subjects[index],
            onsets=None if self.onsets is None else self.onsets[index],
            recordings=None if self.recordings is None else self.recordings[index],
        )

    def with_data(self, data: np.ndarray, step: Optional[str] = None, **changes) -> "EpochSet":
        history = self.history + ((step,) if step else ())
        return replace(self, data=data, history=history, **changes)

    def pick_channels(self, names: Sequence[str]) -> "EpochSet":
        idx = [self.channel_index(n) for n in names]
        return replace(self, data=self.data[:, idx], channel_names=tuple(names))

    def channel_index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise KeyError(f"channel {name!r} not present") from None

    def time_slice(self, tmin: float, tmax: float) -> "EpochSet":
        """Keep samples with ``tmin <= t < tmax`` (tolerant to half a sample)."""
        t = self.times
        half = 0.5 / self.fs
        mask = (t >= tmin - half) & (t < tmax - half)
        if not mask.any():
            raise ValueError(f"window [{tmin}, {tmax}] s holds no samples")
        first = int(np.argmax(mask))
        return replace(self, data=self.data[:, :, mask], tmin=float(t[first]))

    @classmethod
    def concatenate(cls, parts: Sequence["EpochSet"]) -> "EpochSet":
        parts = [p for p in parts]
        if not parts:
            raise ValueError("nothing to concatenate")
        head = parts[0]
        for p in parts[1:]:
            if p.fs != head.fs or p.channel_names != head.channel_names or p.n_samples != head.n_samples:
                raise ValueError("epoch sets differ in fs, channels or epoch length")
        has_onsets = all(p.onsets is not None for p in parts)
        has_recs = all(p.recordings is not None for p in parts)
        return replace(
            head,
            data=np.concatenate([p.data for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            subjects=np.concatenate([p.subjects for p in parts]),
            onsets=np.concatenate([p.onsets for p in parts]) if has_onsets else None,
            recordings=np.concatenate([p.recordings for p in parts]) if has_recs else None,
        )
