"""Experiment configuration: JSON schema, defaults, dotted overrides.

The schema is closed: unknown sections or keys are rejected so typos
cannot silently fall back to defaults.  Overrides use dotted paths
(``section.key=value``) with values parsed as JSON where possible.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .bench import METHODS, pretrain_base
from .errors import ConfigError
from .models import ModelSpec
from .streams import GENERATORS, StreamSpec
from .training import MODES, PerturbConfig, TrainConfig

DEFAULT_CONFIG: dict = {
    "stream": {
        "generator": "gauss_split",
        "num_tasks": 5,
        "classes_per_task": 2,
        "samples_per_class": 200,
        "input_dim": 16,
        "noise_scale": 0.15,
        "master_seed": 0,
    },
    "model": {
        "kind": "mlp2",
        "hidden_dim": 32,
        "activation": "tanh",
        "adapter_rank": 10,
        "pretrain_classes": 8,
        "pretrain_samples_per_class": 200,
        "pretrain_epochs": 3,
        "pretrain_lr": 0.01,
        "pretrain_noise": 0.6,
        "pretrain_seed": 1234,
    },
    "train": {
        "epochs": 15,
        "batch_size": 32,
        "lr_adapter": 0.01,
        "lr_head": 0.1,
        "weight_decay": 0.0,
    },
    "perturb": {
        "mode": "stochastic",
        "eps": 1.0,
        "p0": 1.0 / 3.0,
    },
    "methods": ["naive", "avg_fixed", "merge_only", "pm_gauss", "pm_full"],
    "seeds": [1, 2, 3, 4, 5],
    "out_dir": "out",
    "figures": True,
}

_ENUMS = {
    ("stream", "generator"): GENERATORS,
    ("model", "kind"): ("logistic", "mlp2"),
    ("model", "activation"): ("tanh",),
    ("perturb", "mode"): MODES,
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def _check_against_schema(cfg: dict, schema: dict, prefix: str = "") -> None:
    for key, value in cfg.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        ref = schema[key]
        if isinstance(ref, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix}{key!r} must be a section")
            _check_against_schema(value, ref, prefix=f"{prefix}{key}.")
        elif isinstance(ref, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"config key {prefix}{key!r} must be a boolean")
        elif isinstance(ref, (int, float)) and not isinstance(ref, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {prefix}{key!r} must be numeric")
        elif isinstance(ref, str):
            if not isinstance(value, str):
                raise ConfigError(f"config key {prefix}{key!r} must be a string")
        elif isinstance(ref, list):
            if not isinstance(value, list):
                raise ConfigError(f"config key {prefix}{key!r} must be a list")


def _validate_semantics(cfg: dict) -> None:
    for (section, key), allowed in _ENUMS.items():
        val = cfg[section][key]
        if val not in allowed:
            raise ConfigError(f"{section}.{key} must be one of {list(allowed)}, got {val!r}")
    for method in cfg["methods"]:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; choose from {list(METHODS)}")
    if not cfg["methods"]:
        raise ConfigError("methods must not be empty")
    if not cfg["seeds"]:
        raise ConfigError("seeds must not be empty")
    if len(set(cfg["seeds"])) != len(cfg["seeds"]):
        raise ConfigError("seeds must be distinct")
    for s in cfg["seeds"]:
        if isinstance(s, bool) or not isinstance(s, int):
            raise ConfigError("seeds must be integers")
    # constructing the value objects runs their own validation
    stream_spec(cfg)
    perturb_config(cfg)
    train_config(cfg, seed=int(cfg["seeds"][0]))


def validate_config(cfg: dict) -> dict:
    merged = default_config()
    _check_against_schema(cfg, merged)
    for key, value in cfg.items():
        if isinstance(value, dict):
            merged[key].update(value)
        else:
            merged[key] = copy.deepcopy(value)
    _validate_semantics(merged)
    return merged


def load_config(path: str | Path | None) -> dict:
    """Load and validate a config file; None yields validated defaults."""
    if path is None:
        return validate_config({})
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    return validate_config(raw)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` (or ``key=value``) dotted overrides."""
    out = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, raw_value = item.split("=", 1)
        keys = path.split(".")
        node = out
        ref = DEFAULT_CONFIG
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config section {k!r} in override {item!r}")
            node = node[k]
            ref = ref[k]
        leaf = keys[-1]
        if leaf not in ref or isinstance(ref[leaf], dict):
            raise ConfigError(f"unknown config key {path!r} in override")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value  # bare strings are allowed unquoted
        node[leaf] = value
    return validate_config(out)


def stream_spec(cfg: dict) -> StreamSpec:
    s = cfg["stream"]
    return StreamSpec(
        generator=s["generator"],
        num_tasks=int(s["num_tasks"]),
        classes_per_task=int(s["classes_per_task"]),
        samples_per_class=int(s["samples_per_class"]),
        input_dim=int(s["input_dim"]),
        noise_scale=float(s["noise_scale"]),
        master_seed=int(s["master_seed"]),
    )


def train_config(cfg: dict, seed: int = 0) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        lr_adapter=float(t["lr_adapter"]),
        lr_head=float(t["lr_head"]),
        weight_decay=float(t["weight_decay"]),
        seed=seed,
    )


def perturb_config(cfg: dict) -> PerturbConfig:
    p = cfg["perturb"]
    return PerturbConfig(eps=float(p["eps"]), p0=float(p["p0"]), mode=p["mode"])


def build_model_spec(cfg: dict) -> ModelSpec:
    """Pretrain (for mlp2) and assemble the experiment model spec."""
    stream = stream_spec(cfg)
    m = cfg["model"]
    return pretrain_base(
        kind=m["kind"],
        input_dim=stream.input_dim,
        num_classes=stream.total_classes,
        hidden_dim=int(m["hidden_dim"]),
        activation=m["activation"],
        adapter_rank=int(m["adapter_rank"]),
        pretrain_classes=int(m["pretrain_classes"]),
        pretrain_samples_per_class=int(m["pretrain_samples_per_class"]),
        pretrain_epochs=int(m["pretrain_epochs"]),
        pretrain_lr=float(m["pretrain_lr"]),
        pretrain_noise=float(m["pretrain_noise"]),
        pretrain_seed=int(m["pretrain_seed"]),
    )
