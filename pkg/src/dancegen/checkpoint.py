"""Versioned JSON checkpoint container shared by both training stages.

A checkpoint stores the stage tag, the config dict that built the model,
a hash of that config, and every named parameter as shape + flat float
list. JSON float round-tripping is exact for float64, so save/load is
lossless.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .errors import DependencyError, FormatError

CHECKPOINT_FORMAT = "dancegen-checkpoint"
CHECKPOINT_VERSION = 1


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def save_checkpoint(path, stage: str, config: dict, named_params) -> None:
    params = {}
    for name, p in named_params:
        params[name] = {
            "shape": list(p.data.shape),
            "data": [float(v) for v in p.data.reshape(-1)],
        }
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "config": config,
        "config_hash": config_hash(config),
        "params": params,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, expected_stage: str | None = None):
    """Returns (stage, config, params: dict name -> ndarray, config_hash)."""
    if not os.path.exists(path):
        raise DependencyError(f"checkpoint not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid checkpoint JSON: {e}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {doc.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    stage = doc.get("stage")
    if expected_stage is not None and stage != expected_stage:
        raise FormatError(f"{path}: stage {stage!r} does not match expected {expected_stage!r}")
    params = {}
    for name, entry in doc["params"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = arr
    return stage, doc["config"], params, doc["config_hash"]


def restore_into(model, params: dict) -> None:
    """Copy loaded arrays into a model; names must match exactly."""
    model_params = dict(model.named_parameters())
    missing = set(model_params) - set(params)
    extra = set(params) - set(model_params)
    if missing or extra:
        raise FormatError(
            f"checkpoint/model parameter mismatch: missing {sorted(missing)[:4]}, "
            f"unexpected {sorted(extra)[:4]}"
        )
    for name, p in model_params.items():
        if tuple(params[name].shape) != tuple(p.data.shape):
            raise FormatError(
                f"parameter {name}: checkpoint shape {params[name].shape} "
                f"!= model shape {p.data.shape}"
            )
        p.data = params[name].copy()
