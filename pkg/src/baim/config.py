"""Run configuration for the command line.

A config file is a JSON object with up to seven sections. Every key is
checked against the known schema and unknown keys are rejected::

    {
      "simulator": {...SimulatorConfig fields...},
      "dumps":     {"layers", "tokens", "width", "profile_scale", "noise_std"},
      "extract":   {"target_dim", "strategy"},
      "model":     {"item_repr_mode", "routing", "backbone", "d_kt", "d_history",
                    "hidden", "n_heads", "max_len", "dropout", "noise_std",
                    "scale_by_gate_prob"},
      "train":     {...TrainConfig fields..., "folds", "fold_seed", "test_fold", "window"},
      "paths":     {"dataset", "catalog", "dumps_index", "table", "checkpoint"},
      "analysis":  {"learner_id", "plot"}
    }

Two built-in profiles supply the defaults: ``synthetic`` (desk-scale, the
default) and ``full`` (full-size widths and optimiser settings).
"""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

from .data import SimulatorConfig
from .exceptions import ConfigError, ParseError
from .training import TrainConfig

_SYNTHETIC = {
    "simulator": {f.name: f.default for f in fields(SimulatorConfig)},
    "dumps": {"layers": 3, "tokens": 16, "width": 64, "profile_scale": 1.0, "noise_std": 0.5},
    "extract": {"target_dim": 32, "strategy": "global"},
    "model": {
        "item_repr_mode": "baim", "routing": "adaptive", "backbone": "recurrent",
        "d_kt": 32, "d_history": 8, "hidden": 32, "n_heads": 4, "max_len": 200,
        "dropout": 0.1, "noise_std": 0.25, "scale_by_gate_prob": False,
    },
    "train": {**{f.name: f.default for f in fields(TrainConfig)},
              "batch_size": 32, "learning_rate": 1e-3,
              "folds": 5, "fold_seed": 42, "test_fold": 0, "window": 200},
    "paths": {"dataset": None, "catalog": None, "dumps_index": None,
              "table": None, "checkpoint": None},
    "analysis": {"learner_id": None, "plot": None},
}

_FULL_OVERRIDES = {
    "extract": {"target_dim": 768},
    "model": {"d_kt": 256, "d_history": 64, "hidden": 256},
    "train": {"batch_size": 128, "learning_rate": 1e-4},
}

PROFILES = ("synthetic", "full")


def default_config(profile: str = "synthetic") -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    cfg = copy.deepcopy(_SYNTHETIC)
    if profile == "full":
        for section, values in _FULL_OVERRIDES.items():
            cfg[section].update(values)
    return cfg


def merge(base: dict, overrides: dict, origin: str = "config") -> dict:
    """Overlay ``overrides`` onto ``base``, rejecting unknown sections and keys."""
    out = copy.deepcopy(base)
    if not isinstance(overrides, dict):
        raise ConfigError(f"{origin}: top level must be a JSON object")
    for section, values in overrides.items():
        if section == "profile":
            continue
        if section not in out:
            raise ConfigError(f"{origin}: unknown section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: section {section!r} must be an object")
        unknown = sorted(set(values) - set(out[section]))
        if unknown:
            raise ConfigError(f"{origin}: unknown keys in {section!r}: {unknown}")
        out[section].update(values)
    return out


def load_config(path=None, profile: str | None = None) -> dict:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    profile = profile or doc.get("profile", "synthetic")
    return merge(default_config(profile), doc, str(path or "config"))


def simulator_config(cfg: dict) -> SimulatorConfig:
    return SimulatorConfig(**cfg["simulator"])


def train_config(cfg: dict) -> TrainConfig:
    keep = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg["train"].items() if k in keep})

