"""EDF/EDF+ reading and writing, BIDS-like directory scans and epoch archives.

This is the only module that knows about acquisition file formats.  EDF
samples are 2-byte little-endian integers mapped linearly to physical units
with the per-signal physical/digital extrema stored in the ASCII header.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .epochs import EpochSet

logger = logging.getLogger(__name__)

ANNOTATION_LABEL = "EDF Annotations"
DIGITAL_MIN = -32768
DIGITAL_MAX = 32767
ARCHIVE_FORMAT = "vowelbench-epochs/1"


class EdfError(ValueError):
    """Malformed or unsupported EDF content."""


@dataclass
class SignalHeader:
    label: str
    transducer: str
    physical_dimension: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    prefiltering: str
    samples_per_record: int

    @property
    def is_annotation(self) -> bool:
        return self.label.strip() == ANNOTATION_LABEL

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)


@dataclass
class EdfHeader:
    version: str
    patient_id: str
    recording_id: str
    start_date: str
    start_time: str
    header_bytes: int
    reserved: str
    n_records: int
    record_duration: float
    signals: list

    @property
    def n_signals(self) -> int:
        return len(self.signals)


@dataclass
class Recording:
    """Continuous multi-channel recording in physical units (uV)."""

    samples: np.ndarray
    fs: float
    channel_names: list
    events: list = field(default_factory=list)
    physical_min: Optional[np.ndarray] = None
    physical_max: Optional[np.ndarray] = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        self.channel_names = list(self.channel_names)
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if len(self.channel_names) != self.samples.shape[0]:
            raise ValueError("one channel name per row required")
        n = self.samples.shape[1]
        for idx, _ in self.events:
            if not 0 <= idx < n:
                raise ValueError(f"event index {idx} outside recording of {n} samples")

    @property
    def n_times(self) -> int:
        return self.samples.shape[1]


# --------------------------------------------------------------------------
# header parsing

def _field(buf: bytes, start: int, width: int) -> str:
    return buf[start:start + width].decode("latin-1").strip()


def _number(text: str, name: str, kind=float):
    try:
        return kind(text)
    except ValueError:
        raise EdfError(f"unparsable numeric field {name}: {text!r}") from None


def parse_header(data: bytes) -> EdfHeader:
    if len(data) < 256:
        raise EdfError("truncated stream: fewer than 256 header bytes")
    ns = _number(_field(data, 252, 4), "number of signals", int)
    if ns < 1:
        raise EdfError(f"number of signals must be positive, got {ns}")
    header_bytes = _number(_field(data, 184, 8), "header bytes", int)
    if header_bytes != 256 + 256 * ns:
        raise EdfError(f"header_bytes {header_bytes} != 256 + 256*{ns}")
    if len(data) < header_bytes:
        raise EdfError("truncated stream: signal headers incomplete")

    def column(offset: int, width: int) -> list:
        base = 256 + offset * ns
        return [_field(data, base + i * width, width) for i in range(ns)]

    labels = column(0, 16)
    transducers = column(16, 80)
    dims = column(96, 8)
    pmin = column(104, 8)
    pmax = column(112, 8)
    dmin = column(120, 8)
    dmax = column(128, 8)
    prefilter = column(136, 80)
    spr = column(216, 8)
    signals = []
    for i in range(ns):
        sig = SignalHeader(
            label=labels[i],
            transducer=transducers[i],
            physical_dimension=dims[i],
            physical_min=_number(pmin[i], f"physical minimum[{i}]"),
            physical_max=_number(pmax[i], f"physical maximum[{i}]"),
            digital_min=_number(dmin[i], f"digital minimum[{i}]", int),
            digital_max=_number(dmax[i], f"digital maximum[{i}]", int),
            prefiltering=prefilter[i],
            samples_per_record=_number(spr[i], f"samples per record[{i}]", int),
        )
        if sig.digital_max == sig.digital_min:
            raise EdfError(f"signal {sig.label!r}: digital_min == digital_max, scaling undefined")
        if sig.samples_per_record < 1:
            raise EdfError(f"signal {sig.label!r}: samples per record must be positive")
        signals.append(sig)
    return EdfHeader(
        version=_field(data, 0, 8),
        patient_id=_field(data, 8, 80),
        recording_id=_field(data, 88, 80),
        start_date=_field(data, 168, 8),
        start_time=_field(data, 176, 8),
        header_bytes=header_bytes,
        reserved=_field(data, 192, 44),
        n_records=_number(_field(data, 236, 8), "number of data records", int),
        record_duration=_number(_field(data, 244, 8), "record duration"),
        signals=signals,
    )


_TAL = re.compile(r"([+-]\d+(?:\.\d*)?)(?:\x15(\d+(?:\.\d*)?))?\x14(.*?)\x14\x00", re.S)


def _parse_tals(raw: bytes) -> list:
    """Return (onset_seconds, label) pairs from EDF+ annotation bytes."""
    out = []
    text = raw.decode("utf-8", errors="replace")
    for onset, _duration, body in _TAL.findall(text):
        for label in body.split("\x14"):
            if label:
                out.append((float(onset), label))
    return out


def parse_edf(data: bytes, strict_length: bool = True) -> Recording:
    """Parse an EDF or EDF+ (continuous) byte stream into a Recording.

    Ordinary signals are converted to physical units by the linear map
    ``pmin + (d - dmin) * (pmax - pmin) / (dmax - dmin)``.  Signals labelled
    ``EDF Annotations`` are decoded into ``(sample_index, label)`` events and
    left out of the sample matrix.
    """
    data = bytes(data)
    header = parse_header(data)
    spr = np.array([s.samples_per_record for s in header.signals])
    record_bytes = int(spr.sum()) * 2
    body = len(data) - header.header_bytes
    n_records = header.n_records
    if n_records < 0:
        n_records = body // record_bytes
    if body < n_records * record_bytes:
        raise EdfError(
            f"truncated stream: expected {n_records} records of {record_bytes} bytes, "
            f"found {body} bytes"
        )
    if strict_length and body > n_records * record_bytes:
        logger.warning("ignoring %d trailing bytes", body - n_records * record_bytes)

    raw = np.frombuffer(
        data, dtype="<i2", count=n_records * record_bytes // 2, offset=header.header_bytes
    ).reshape(n_records, -1)
    bounds = np.concatenate([[0], np.cumsum(spr)])

    data_idx = [i for i, s in enumerate(header.signals) if not s.is_annotation]
    ann_idx = [i for i, s in enumerate(header.signals) if s.is_annotation]
    if not data_idx:
        raise EdfError("no data signals in stream")
    rates = {header.signals[i].samples_per_record for i in data_idx}
    if len(rates) != 1:
        raise EdfError("signals with differing sample rates are not supported")
    if header.record_duration <= 0:
        raise EdfError("record duration must be positive")
    fs = rates.pop() / header.record_duration

    rows = []
    for i in data_idx:
        sig = header.signals[i]
        digital = raw[:, bounds[i]:bounds[i + 1]].reshape(-1).astype(np.float64)
        rows.append(sig.physical_min + (digital - sig.digital_min) * sig.gain)
    samples = np.vstack(rows) if rows else np.zeros((0, 0))

    events = []
    n_times = samples.shape[1]
    for i in ann_idx:
        chunk = raw[:, bounds[i]:bounds[i + 1]]
        for rec in range(n_records):
            for onset, label in _parse_tals(chunk[rec].tobytes()):
                idx = int(round(onset * fs))
                if 0 <= idx < n_times:
                    events.append((idx, label))
                else:
                    logger.warning("annotation %r at %.4f s lies outside the data", label, onset)
    events.sort(key=lambda e: e[0])
    return Recording(
        samples=samples,
        fs=fs,
        channel_names=[header.signals[i].label for i in data_idx],
        events=events,
        physical_min=np.array([header.signals[i].physical_min for i in data_idx]),
        physical_max=np.array([header.signals[i].physical_max for i in data_idx]),
    )


def read_edf(path) -> Recording:
    return parse_edf(Path(path).read_bytes())


# --------------------------------------------------------------------------
# writing

def _ascii(value, width: int) -> bytes:
    text = str(value)
    if len(text) > width:
        raise EdfError(f"field {text!r} does not fit in {width} characters")
    return text.ljust(width).encode("latin-1")


def _fit_number(value: float, width: int = 8, direction: str = "nearest") -> str:
    """Format ``value`` into at most ``width`` characters.

    ``direction`` 'down'/'up' round toward -inf/+inf so that a data range
    stays inside the declared physical range after formatting.
    """
    if value == int(value) and len(str(int(value))) <= width:
        return str(int(value))
    for decimals in range(width, -1, -1):
        scale = 10.0 ** decimals
        if direction == "down":
            v = math.floor(value * scale) / scale
        elif direction == "up":
            v = math.ceil(value * scale) / scale
        else:
            v = round(value, decimals)
        text = f"{v:.{decimals}f}"
        if "." in text:
            text = text.rstrip("0").rstrip(".")
        if text in ("-0", ""):
            text = "0"
        if len(text) <= width:
            return text
    raise EdfError(f"cannot represent {value!r} in {width} characters")


def quantize(samples: np.ndarray, pmin: np.ndarray, pmax: np.ndarray):
    """Digital codes and their physical reconstruction for given ranges."""
    pmin = np.asarray(pmin, dtype=np.float64)[:, None]
    pmax = np.asarray(pmax, dtype=np.float64)[:, None]
    gain = (pmax - pmin) / (DIGITAL_MAX - DIGITAL_MIN)
    digital = np.rint((samples - pmin) / gain + DIGITAL_MIN)
    digital = np.clip(digital, DIGITAL_MIN, DIGITAL_MAX).astype(np.int16)
    physical = pmin + (digital.astype(np.float64) - DIGITAL_MIN) * gain
    return digital, physical


def _physical_ranges(rec: Recording):
    data = rec.samples
    if rec.physical_min is not None and rec.physical_max is not None:
        lo = np.asarray(rec.physical_min, dtype=np.float64)
        hi = np.asarray(rec.physical_max, dtype=np.float64)
        if np.any(data.min(axis=1) < lo) or np.any(data.max(axis=1) > hi):
            raise ValueError("samples exceed the declared physical range")
    else:
        lo = data.min(axis=1) if data.size else np.zeros(len(data))
        hi = data.max(axis=1) if data.size else np.ones(len(data))
        # flat channels get unit gain so integer levels (zeros) survive exactly
        flat = hi <= lo
        base = np.floor(lo) + DIGITAL_MIN
        lo = np.where(flat, base, lo)
        hi = np.where(flat, base + (DIGITAL_MAX - DIGITAL_MIN), hi)
    lo_txt = [_fit_number(v, direction="down") for v in lo]
    hi_txt = [_fit_number(v, direction="up") for v in hi]
    return lo_txt, hi_txt


def _annotation_records(events, fs, n_records, record_duration) -> list:
    per_record = [[] for _ in range(n_records)]
    for idx, label in events:
        onset = idx / fs
        rec = min(int(onset // record_duration), n_records - 1)
        per_record[rec].append((onset, label))
    blobs = []
    for r, items in enumerate(per_record):
        keep = f"+{_fit_number(r * record_duration, 16)}\x14\x14\x00"
        tals = "".join(f"+{_fit_number(on, 16)}\x14{label}\x14\x00" for on, label in items)
        blobs.append((keep + tals).encode("utf-8"))
    return blobs


def write_edf(rec: Recording, record_duration: float = 1.0,
              patient_id: str = "X X X X", recording_id: str = "Startdate X X X X") -> bytes:
    """Serialize a Recording as EDF (EDF+C when it carries events).

    The sample count must be a whole number of data records.
    """
    samples = np.asarray(rec.samples, dtype=np.float64)
    n_ch, n_times = samples.shape
    if n_ch < 1:
        raise ValueError("at least one channel required")
    if not np.all(np.isfinite(samples)):
        raise ValueError("samples must be finite")
    spr_f = rec.fs * record_duration
    spr = int(round(spr_f))
    if spr < 1 or abs(spr - spr_f) > 1e-9:
        raise ValueError("fs * record_duration must be a positive integer")
    if n_times % spr:
        raise ValueError(f"{n_times} samples is not a whole number of {spr}-sample records")
    n_records = n_times // spr

    lo_txt, hi_txt = _physical_ranges(rec)
    digital, _ = quantize(samples, [float(v) for v in lo_txt], [float(v) for v in hi_txt])

    ann_blobs = _annotation_records(rec.events, rec.fs, n_records, record_duration) if rec.events else []
    ann_spr = max((len(b) + 1) // 2 for b in ann_blobs) if ann_blobs else 0
    ns = n_ch + (1 if ann_blobs else 0)

    head = b"".join([
        _ascii("0", 8),
        _ascii(patient_id, 80),
        _ascii(recording_id, 80),
        _ascii("01.01.00", 8),
        _ascii("00.00.00", 8),
        _ascii(256 + 256 * ns, 8),
        _ascii("EDF+C" if ann_blobs else "", 44),
        _ascii(n_records, 8),
        _ascii(_fit_number(record_duration), 8),
        _ascii(ns, 4),
    ])
    labels = list(rec.channel_names) + ([ANNOTATION_LABEL] if ann_blobs else [])
    pmins = lo_txt + (["-1"] if ann_blobs else [])
    pmaxs = hi_txt + (["1"] if ann_blobs else [])
    sprs = [spr] * n_ch + ([ann_spr] if ann_blobs else [])
    dims = ["uV"] * n_ch + ([""] if ann_blobs else [])
    columns = [
        [_ascii(v, 16) for v in labels],
        [_ascii("", 80) for _ in labels],
        [_ascii(v, 8) for v in dims],
        [_ascii(v, 8) for v in pmins],
        [_ascii(v, 8) for v in pmaxs],
        [_ascii(DIGITAL_MIN, 8) for _ in labels],
        [_ascii(DIGITAL_MAX, 8) for _ in labels],
        [_ascii("", 80) for _ in labels],
        [_ascii(v, 8) for v in sprs],
        [_ascii("", 32) for _ in labels],
    ]
    head += b"".join(b"".join(col) for col in columns)

    records = digital.reshape(n_ch, n_records, spr).transpose(1, 0, 2).reshape(n_records, -1)
    if ann_blobs:
        ann = np.zeros((n_records, ann_spr * 2), dtype=np.uint8)
        for r, blob in enumerate(ann_blobs):
            ann[r, :len(blob)] = np.frombuffer(blob, dtype=np.uint8)
        records = np.concatenate([records.astype("<i2").view(np.uint8), ann], axis=1)
        return head + records.tobytes()
    return head + records.astype("<i2").tobytes()


def write_edf_file(rec: Recording, path, **kwargs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_edf(rec, **kwargs))
    return path


# --------------------------------------------------------------------------
# directory layout

_SUBJECT_DIR = re.compile(r"^(?:sub-)?S?(\d+)$", re.I)


def subject_id(name: str) -> Optional[str]:
    """Canonical ``Snn`` id for a subject folder name, or None."""
    m = _SUBJECT_DIR.match(name)
    if not m:
        return None
    return f"S{int(m.group(1)):02d}"


def scan_bids(root, pattern: str = "*.edf", expected: Optional[Sequence[str]] = None) -> list:
    """List ``(subject_id, edf_paths)`` for subject folders under ``root``.

    Folders named ``sub-01`` or ``S01`` are recognised; anything else is
    ignored.  Subjects without matching EDF files, and ``expected`` subjects
    not found at all, are logged rather than raised.
    """
    root = Path(root)
    if not root.is_dir():
        raise NotADirectoryError(f"cannot read directory {root}")
    found = {}
    for entry in sorted(root.iterdir()):
        if not entry.is_dir():
            continue
        sid = subject_id(entry.name)
        if sid is None:
            continue
        paths = sorted(p for p in entry.rglob(pattern) if p.is_file())
        if not paths:
            logger.warning("subject %s has no files matching %s", sid, pattern)
            continue
        found.setdefault(sid, []).extend(paths)
    for sid in expected or ():
        if sid not in found:
            logger.warning("expected subject %s missing under %s", sid, root)
    return [(sid, found[sid]) for sid in sorted(found)]


# --------------------------------------------------------------------------
# epoching

def epoch_length(tmin: float, tmax: float, fs: float) -> int:
    return int(round((tmax - tmin) * fs))


def epoch_from_events(rec: Recording, tmin: float, tmax: float, label_map: Mapping[str, int],
                      subject: str = "S00", recording_id: str = "run-1",
                      ignore_unmapped: bool = False) -> EpochSet:
    """Cut stimulus-locked windows ``[onset + tmin, onset + tmax)`` from a recording."""
    n = epoch_length(tmin, tmax, rec.fs)
    offset = int(round(tmin * rec.fs))
    starts, labels, onsets = [], [], []
    for idx, label in rec.events:
        if label not in label_map:
            if ignore_unmapped:
                continue
            raise KeyError(f"event label {label!r} absent from label_map")
        start = idx + offset
        if start < 0 or start + n > rec.n_times:
            raise IndexError(
                f"epoch window for event at sample {idx} falls outside the recording"
            )
        starts.append(start)
        labels.append(int(label_map[label]))
        onsets.append(idx)
    if starts:
        data = np.stack([rec.samples[:, s:s + n] for s in starts])
    else:
        data = np.zeros((0, len(rec.channel_names), n))
    return EpochSet(
        data=data,
        labels=np.array(labels, dtype=np.int64),
        subjects=np.array([subject] * len(starts)),
        fs=rec.fs,
        channel_names=tuple(rec.channel_names),
        tmin=offset / rec.fs,
        onsets=np.array(onsets, dtype=np.int64),
        recordings=np.array([f"{subject}/{recording_id}"] * len(starts)),
        history=("epoch",),
    )


# --------------------------------------------------------------------------
# archive

def params_hash(params: Mapping) -> str:
    text = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def write_archive(epochs: EpochSet, directory, params: Optional[Mapping] = None) -> Path:
    """Write ``manifest.json`` plus a little-endian float32 ``epochs.f32`` blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if epochs.n_trials and (epochs.labels.min() < 0 or epochs.labels.max() > 4):
        raise ValueError("labels must lie in 0..4")
    blob = np.ascontiguousarray(epochs.data, dtype="<f4").tobytes()
    params = dict(params or {})
    manifest = {
        "format": ARCHIVE_FORMAT,
        "shape": list(epochs.data.shape),
        "dtype": "<f4",
        "order": "trial,channel,sample",
        "fs": epochs.fs,
        "tmin": epochs.tmin,
        "channel_names": list(epochs.channel_names),
        "labels": epochs.labels.tolist(),
        "subjects": epochs.subjects.tolist(),
        "onsets": None if epochs.onsets is None else [int(v) for v in epochs.onsets],
        "recordings": None if epochs.recordings is None else epochs.recordings.tolist(),
        "history": list(epochs.history),
        "params": params,
        "params_hash": params_hash(params),
        "blob": "epochs.f32",
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    (directory / "epochs.f32").write_bytes(blob)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def read_archive(directory) -> EpochSet:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.get("format") != ARCHIVE_FORMAT:
        raise ValueError(f"unknown archive format {manifest.get('format')!r}")
    blob = (directory / manifest["blob"]).read_bytes()
    shape = tuple(manifest["shape"])
    if len(blob) != int(np.prod(shape)) * 4:
        raise ValueError(f"blob holds {len(blob)} bytes, manifest shape {shape} needs {int(np.prod(shape)) * 4}")
    labels = np.array(manifest["labels"], dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > 4):
        raise ValueError("archive labels outside 0..4")
    data = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float64)
    return EpochSet(
        data=data,
        labels=labels,
        subjects=np.array(manifest["subjects"], dtype=str),
        fs=manifest["fs"],
        channel_names=tuple(manifest["channel_names"]),
        tmin=manifest["tmin"],
        onsets=None if manifest["onsets"] is None else np.array(manifest["onsets"]),
        recordings=None if manifest["recordings"] is None else np.array(manifest["recordings"]),
        history=tuple(manifest.get("history", ())),
    )


def archive_is_stale(directory, params: Mapping) -> bool:
    """True when the archive was built from different preprocessing parameters."""
    try:
        return read_manifest(directory).get("params_hash") != params_hash(dict(params))
    except FileNotFoundError:
        return True
