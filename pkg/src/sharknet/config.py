"""Run configuration: a JSON document with a fixed key schema.

Top-level sections and their keys (defaults in :data:`DEFAULTS`)::

    seed, output_dir
    model:   input_size, dropout
    train:   learning_rate, batch_size, max_epochs, beta1, beta2, epsilon,
             monitor, patience, restore_best
    data:    manifest, synth {num_classes, per_class, image_size},
             test_fraction, val_fraction, mask_background
    cv:      k, topology
    search:  trials, batch_sizes, epochs, learning_rates
    tsne:    perplexity, exaggeration_factor, exaggeration_iters,
             constant_exaggeration, total_iters, learning_rate
    shap:    method, grid, samples, n_steps, background_per_class,
             n_images, output

Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from . import __version__
from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "output_dir": None,
    "model": {"input_size": 64, "dropout": 0.5},
    "train": {
        "learning_rate": 1e-4, "batch_size": 128, "max_epochs": 60,
        "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-7,
        "monitor": "val_loss", "patience": 10, "restore_best": True,
    },
    "data": {
        "manifest": None,
        "synth": {"num_classes": 10, "per_class": 100, "image_size": 64},
        "test_fraction": 0.1, "val_fraction": 0.1, "mask_background": False,
    },
    "cv": {"k": 5, "topology": "fold"},
    "search": {
        "trials": 10, "batch_sizes": [16, 32, 64, 128], "epochs": [10, 100],
        "learning_rates": [0.01, 0.001, 0.0005, 0.0001],
    },
    "tsne": {
        "perplexity": 30.0, "exaggeration_factor": 12.0, "exaggeration_iters": 250,
        "constant_exaggeration": False, "total_iters": 1000, "learning_rate": None,
    },
    "shap": {
        "method": "kernel", "grid": 8, "samples": 2048, "n_steps": 32,
        "background_per_class": 16, "n_images": 3, "output": "probability",
    },
}

OUTPUT_ENV = "SHARKNET_OUTPUT"


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def resolve(override: dict | None = None) -> dict:
    cfg = _merge(DEFAULTS, override or {})
    if cfg["output_dir"] is None:
        cfg["output_dir"] = os.environ.get(OUTPUT_ENV, "runs")
    if cfg["shap"]["method"] not in ("kernel", "gradient"):
        raise ConfigError("shap.method must be 'kernel' or 'gradient'")
    if cfg["cv"]["topology"] not in ("fold", "global"):
        raise ConfigError("cv.topology must be 'fold' or 'global'")
    return cfg


def load(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def run_id(cfg: dict) -> str:
    """Content address of the resolved config (output location excluded) and code version."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(body, sort_keys=True) + "|" + __version__
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
