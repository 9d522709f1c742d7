"""Run configuration: strict JSON files with preset expansion.

A config is a flat JSON object.  `preset` expands to a named bundle of
defaults first, then explicit keys override it.  Unknown keys are rejected
by name so a typo in a hyperparameter cannot silently change an experiment.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .schedule import ScheduleConfig
from .stochastic import VhpModel
from .trainer import TrainConfig

PRESETS = {
    "pendulum": {
        "hidden": [256, 256, 256, 256],
        "activation": "relu",
        "gated": False,
        "decoder_family": "gaussian",
        "dim_z": 2,
        "dim_zeta": 2,
        "iw_samples": 16,
        "algorithm": "rewo",
        "kappa": 0.02,
        "nu": 5.0,
        "learning_rate": 1e-4,
        "batch_size": 128,
    },
}

_DEFAULTS = {
    "seed": 0,
    "data": None,
    "out": None,
    "log": None,
    "activation": "relu",
    "gated": False,
    "decoder_family": "gaussian",
    "iw_samples": 16,
    "algorithm": "rewo",
    "kappa": 0.02,
    "nu": 1.0,
    "tau": 3.0,
    "alpha": 0.99,
    "beta0": 1e-3,
    "warmup_steps": None,
    "learning_rate": 1e-4,
    "batch_size": 128,
    "epochs": 20,
    "s_loglik": 1000,
}

_REQUIRED = ("hidden", "dim_z", "dim_zeta")

_INT_FIELDS = {"seed": 0, "dim_z": 1, "dim_zeta": 1, "iw_samples": 1,
               "batch_size": 1, "epochs": 0, "s_loglik": 1, "warmup_steps": 1}
_FLOAT_FIELDS = ("kappa", "nu", "tau", "alpha", "beta0", "learning_rate")
_STR_FIELDS = ("activation", "decoder_family", "algorithm")
_PATH_FIELDS = ("data", "out", "log")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Validated settings for one run: model, schedule, optimiser, paths."""

    seed: int
    data: str | None
    out: str | None
    log: str | None
    hidden: tuple
    activation: str
    gated: bool
    decoder_family: str
    dim_z: int
    dim_zeta: int
    iw_samples: int
    algorithm: str
    kappa: float
    nu: float
    tau: float
    alpha: float
    beta0: float
    warmup_steps: int | None
    learning_rate: float
    batch_size: int
    epochs: int
    s_loglik: int

    def schedule_config(self):
        return ScheduleConfig(kappa=self.kappa, nu=self.nu, tau=self.tau,
                              alpha=self.alpha, beta0=self.beta0,
                              algorithm=self.algorithm,
                              warmup_steps=self.warmup_steps)

    def train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=self.seed)

    def create_model(self, dim_x):
        rng = np.random.default_rng(self.seed)
        return VhpModel.create(rng, dim_x, self.dim_z, self.dim_zeta,
                               hidden=self.hidden,
                               activation=self.activation,
                               decoder_family=self.decoder_family,
                               iw_samples=self.iw_samples,
                               gated=self.gated)


def _check_int(key, value, minimum):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"config key '{key}' must be an integer")
    if value < minimum:
        raise ValueError(f"config key '{key}' must be >= {minimum}")
    return value


def _merged(raw):
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    merged = dict(_DEFAULTS)
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            known = ", ".join(sorted(PRESETS))
            raise ValueError(f"unknown preset '{preset}' (known: {known})")
        merged.update(PRESETS[preset])
    known_keys = set(_DEFAULTS) | set(_REQUIRED)
    for key, value in raw.items():
        if key == "preset":
            continue
        if key not in known_keys:
            raise ValueError(f"unknown config key '{key}'")
        merged[key] = value
    for key in _REQUIRED:
        if key not in merged:
            raise ValueError(f"missing required config key '{key}'")
    return merged


def config_from_dict(raw):
    """Validate a parsed JSON object into a RunConfig."""
    merged = _merged(raw)
    out = {}
    for key, minimum in _INT_FIELDS.items():
        if key == "warmup_steps" and merged[key] is None:
            out[key] = None
            continue
        out[key] = _check_int(key, merged[key], minimum)
    for key in _FLOAT_FIELDS:
        value = merged[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config key '{key}' must be a number")
        out[key] = float(value)
    for key in _STR_FIELDS:
        if not isinstance(merged[key], str):
            raise ValueError(f"config key '{key}' must be a string")
        out[key] = merged[key]
    for key in _PATH_FIELDS:
        value = merged[key]
        if value is not None and not isinstance(value, str):
            raise ValueError(f"config key '{key}' must be a path string")
        out[key] = value
    if not isinstance(merged["gated"], bool):
        raise ValueError("config key 'gated' must be a boolean")
    out["gated"] = merged["gated"]
    hidden = merged["hidden"]
    if (not isinstance(hidden, (list, tuple)) or len(hidden) < 1
            or any(isinstance(h, bool) or not isinstance(h, int) or h < 1
                   for h in hidden)):
        raise ValueError("config key 'hidden' must be a list of widths >= 1")
    out["hidden"] = tuple(hidden)
    cfg = RunConfig(**out)
    cfg.schedule_config()  # range checks live in the target configs
    cfg.train_config()
    return cfg


def parse_config(path):
    """Load and validate a JSON config file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ValueError(f"config {path}: invalid JSON ({err})") from err
    return config_from_dict(raw)
