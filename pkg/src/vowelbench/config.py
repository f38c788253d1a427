"""Run configuration: a YAML document checked against a fixed schema.

Every section has defaults; unknown keys anywhere outside the free-form maps
are rejected.  The canonical JSON of the merged document is hashed and the
hash is stamped into every output header.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

DATA_ROOT_ENV = "VOWELBENCH_DATA_ROOT"

MODEL_NAMES = ("gbdt", "random_forest", "lda_shrinkage", "linear_svm", "logistic",
               "MDM", "MDM+EA", "TS-LDA", "TS-SVM", "TS-SVM+EA", "soft_vote", "stacking")
ANALYSES = ("pairwise", "rsa", "importance", "dropout", "erp", "learning_curve", "within_subject")

DEFAULTS: dict = {
    "seed": 42,
    "data": {
        "source": "synth",          # synth | archive
        "root": None,
        "archive": None,
        "pattern": "*.edf",
        "event_map": {},
    },
    "preprocess": {
        "bandpass_lo": 0.5,
        "bandpass_hi": 40.0,
        "bandpass_order": 4,
        "resample_fs": 256.0,
        "reject_p2p_uv": 400.0,
        "badchan_z": 3.0,
        "epoch_tmin": -0.2,
        "epoch_tmax": 1.0,
        "baseline_window": [-0.2, 0.0],
    },
    "features": {
        "families": ["bandpower", "de", "hjorth", "temporal"],
        "pca_k": None,
    },
    "model": {
        "models": ["gbdt", "random_forest", "lda_shrinkage", "linear_svm", "logistic",
                   "MDM", "MDM+EA", "TS-LDA", "TS-SVM", "TS-SVM+EA"],
        "params": {},
    },
    "eval": {
        "protocol": "loso",         # loso | within_subject
        "seed": None,
        "strict_audit": True,
        "n_jobs": 1,
        "k": 5,
        "tgm_step": 4,
        "learning_curve_ns": [1, 3, 5, 7, 9, 11, 13, 15],
        "learning_curve_reps": 5,
    },
    "stats": {
        "n_perm": 10000,
        "correction": "bonferroni",
        "chance": None,
    },
    "analyses": {
        "run": [],
        "model": "gbdt",
        "families": ["de"],
        "formants": None,
        "regions": {},
        "time_windows": [[0.0, 1.0], [0.0, 0.2]],
        "pca_grid": [None, 10, 50],
        "dropout_ks": [0, 1, 2, 4, 8],
        "erp_channels": ["Cz", "FCz"],
    },
    "synth": {},
}

FREE_FORM = {("data", "event_map"), ("model", "params"), ("analyses", "formants"), ("analyses", "regions"),
             ("synth",)}


class ConfigError(ValueError):
    """Schema violation in a run configuration."""


def _merge(base: dict, user: Mapping, path: tuple) -> dict:
    if not isinstance(user, Mapping):
        raise ConfigError(f"{'.'.join(path) or 'config'}: expected a mapping, got {type(user).__name__}")
    out = copy.deepcopy(base)
    for key, value in user.items():
        here = path + (str(key),)
        if key not in base:
            raise ConfigError(f"unknown key {'.'.join(here)}")
        if here in FREE_FORM:
            if value is not None and not isinstance(value, Mapping):
                raise ConfigError(f"{'.'.join(here)}: expected a mapping")
            out[key] = copy.deepcopy(value)
        elif isinstance(base[key], dict):
            out[key] = _merge(base[key], value or {}, here)
        else:
            out[key] = value
    return out


def _check(cfg: dict):
    from .features import FAMILIES

    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if cfg["data"]["source"] not in ("synth", "archive"):
        raise ConfigError("data.source must be 'synth' or 'archive'")
    models = cfg["model"]["models"]
    if not isinstance(models, list) or not models:
        raise ConfigError("model.models must be a non-empty list")
    bad = [m for m in models if m not in MODEL_NAMES]
    if bad:
        raise ConfigError(f"model.models: unknown models {bad}")
    for name in cfg["model"]["params"]:
        if name not in ("gbdt", "random_forest", "lda_shrinkage", "linear_svm", "logistic"):
            raise ConfigError(f"model.params: no tunable model {name!r}")
    ev = cfg["eval"]
    if ev["protocol"] not in ("loso", "within_subject"):
        raise ConfigError("eval.protocol must be 'loso' or 'within_subject'")
    if not isinstance(ev["n_jobs"], int) or ev["n_jobs"] == 0:
        raise ConfigError("eval.n_jobs must be a non-zero integer")
    if cfg["stats"]["correction"] not in ("bonferroni", "bh_fdr", "none"):
        raise ConfigError("stats.correction must be bonferroni, bh_fdr or none")
    bad = [a for a in cfg["analyses"]["run"] if a not in ANALYSES]
    if bad:
        raise ConfigError(f"analyses.run: unknown analyses {bad}")
    if "rsa" in cfg["analyses"]["run"] and not cfg["analyses"]["formants"]:
        raise ConfigError("analyses.rsa needs analyses.formants (F1/F2 per vowel)")
    for key in (("features", "families"), ("analyses", "families")):
        fams = cfg[key[0]][key[1]]
        if not fams or any(f not in FAMILIES for f in fams):
            raise ConfigError(f"{'.'.join(key)} must be a non-empty subset of {list(FAMILIES)}")
    try:
        synth_spec(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from None


def load_config(source: Any = None) -> dict:
    """Merge a path, YAML text or mapping over the defaults and validate it."""
    if source is None:
        user = {}
    elif isinstance(source, Mapping):
        user = dict(source)
    else:
        text = Path(source).read_text() if isinstance(source, Path) or (
            isinstance(source, str) and "\n" not in source and Path(source).exists()) else str(source)
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config: {str(exc).splitlines()[0]}") from None
    cfg = _merge(DEFAULTS, user, ())
    _check(cfg)
    return cfg


def config_hash(cfg: Mapping) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def run_seed(cfg: Mapping) -> int:
    return int(cfg["eval"]["seed"] if cfg["eval"]["seed"] is not None else cfg["seed"])


def data_root(cfg: Mapping) -> Optional[str]:
    """``data.root``, overridden by the environment variable when set."""
    return os.environ.get(DATA_ROOT_ENV) or cfg["data"]["root"]


def preprocess_params(cfg: Mapping) -> dict:
    p = cfg["preprocess"]
    return {
        "bandpass.lo": p["bandpass_lo"],
        "bandpass.hi": p["bandpass_hi"],
        "bandpass.order": p["bandpass_order"],
        "resample.fs": p["resample_fs"],
        "reject.p2p_uv": p["reject_p2p_uv"],
        "badchan.z": p["badchan_z"],
        "epoch.tmin": p["epoch_tmin"],
        "epoch.tmax": p["epoch_tmax"],
        "baseline.window": tuple(p["baseline_window"]),
    }


def synth_spec(cfg: Mapping):
    from .synth import SynthSpec

    fields = dict(cfg["synth"] or {})
    fields.setdefault("seed", cfg["seed"])
    for key in ("channel_names", "plant_channels", "band", "erp_window", "artifact_trials"):
        if fields.get(key) is not None:
            fields[key] = tuple(fields[key])
    fields.setdefault("tmin", cfg["preprocess"]["epoch_tmin"])
    fields.setdefault("tmax", cfg["preprocess"]["epoch_tmax"])
    return SynthSpec(**fields)
