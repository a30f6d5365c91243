"""Flat key=value experiment configuration.

Keys are dotted (``section.key``), every key has a default, and values are
parsed by the type of their default, so the whole format stays trivially
parseable.  ``#`` starts a comment.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .scenes import DomainParams, default_palette

DEFAULTS: dict[str, object] = {
    "seed": 0,

    "data.width": 64,
    "data.height": 64,
    "data.num_classes": 8,
    "data.n_source": 120,
    "data.n_target": 80,
    "data.n_val": 16,
    "data.n_test": 24,
    "data.root": "",

    "source.texture_period": 8.0,
    "source.noise_sigma": 0.02,
    "source.horizon_frac": 0.30,
    "source.lighting_gain": 1.2,
    "source.object_rate": 6.0,
    "source.palette": "",

    "target.texture_period": 5.0,
    "target.noise_sigma": 0.06,
    "target.horizon_frac": 0.40,
    "target.lighting_gain": 0.9,
    "target.object_rate": 6.0,
    "target.palette": "",

    "estimator.kind": "logistic-regression",
    "estimator.k": 5,
    "estimator.epochs": 300,
    "estimator.lr": 0.2,
    "estimator.l2": 1e-4,
    "estimator.batch_size": 32,
    "estimator.standardize": True,

    "superpix.n_segments": 100,
    "superpix.compactness": 0.25,
    "superpix.iters": 10,
    "superpix.fraction": 0.6,
    "superpix.temperature": 0.08,
    "superpix.svm_epochs": 10,
    "superpix.svm_lambda": 1e-3,
    "superpix.confidence": "margin",

    "train.regime": "source-only",
    "train.gamma": 0.5,
    "train.batch_source": 5,
    "train.batch_target": 5,
    "train.source_only_batch": 15,
    "train.epochs": 12,
    "train.adadelta_rho": 0.95,
    "train.adadelta_eps": 1e-6,
    "train.image_weight": 1.0,
    "train.superpixel_weight": 1.0,

    "output.dir": "out",
    "output.checkpoint": "model.ckpt",
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str) -> object:
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
    return raw


def parse_config(text: str) -> dict[str, object]:
    """Defaults overlaid with the assignments in ``text``."""
    cfg = dict(DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg[key] = _parse_value(key, raw)
    return cfg


def load_config(path) -> dict[str, object]:
    return parse_config(Path(path).read_text())


def apply_overrides(cfg: dict[str, object], assignments: list[str]) -> dict[str, object]:
    """Apply ``key=value`` strings (the CLI's --set) on top of a config."""
    out = dict(cfg)
    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigError(f"override {assignment!r} is not key=value")
        key, _, raw = assignment.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def serialize_config(cfg: dict[str, object]) -> str:
    lines = []
    for key in DEFAULTS:
        value = cfg[key]
        if isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, float):
            value = f"{value:.17g}"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict[str, object]) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:12]


def domain_params_from_config(cfg: dict[str, object], section: str) -> DomainParams:
    num_classes = int(cfg["data.num_classes"])
    raw_palette = str(cfg[f"{section}.palette"])
    if raw_palette:
        palette = np.array([[float(v) for v in row.split(",")]
                            for row in raw_palette.split(";")])
    else:
        palette = default_palette(num_classes)
    return DomainParams(
        num_classes=num_classes,
        texture_period=float(cfg[f"{section}.texture_period"]),
        noise_sigma=float(cfg[f"{section}.noise_sigma"]),
        horizon_frac=float(cfg[f"{section}.horizon_frac"]),
        lighting_gain=float(cfg[f"{section}.lighting_gain"]),
        object_rate=float(cfg[f"{section}.object_rate"]),
        palette=palette,
    )
