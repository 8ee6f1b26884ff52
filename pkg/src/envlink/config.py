"""Experiment configuration: JSON schema, defaults, strict validation.

A config file is a single JSON object with the sections below.  Unknown keys
anywhere are rejected by name, so typos fail fast instead of silently running
with defaults.

Top level:
  protocol   data source (required): see PROTOCOL_KEYS per kind
  split      {"train": int, "val": int, "test": int} snapshot counts
  train      training hyperparameters mirroring TrainConfig (minus seed)
  seeds      list of training seeds, one full run each (default [0])
  no_intervention   ablation flag: forces the intervention-variance weight
                    alpha to zero (recorded in the config echo)
  out_dir    optional default output directory
"""

from __future__ import annotations

import dataclasses
import json
from typing import Any

from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


TOP_KEYS = {"protocol", "split", "train", "seeds", "no_intervention", "out_dir"}

_PROTOCOL_COMMON = {"kind", "seed", "data_dir"}
PROTOCOL_KEYS: dict[str, set[str]] = {
    "env_synthetic": _PROTOCOL_COMMON | {
        "num_nodes", "num_snapshots", "channels", "sigma_e", "q_bar",
        "feature_dim", "neighbors", "test_snapshots",
    },
    "attribute_filter": _PROTOCOL_COMMON | {
        "num_nodes", "num_snapshots", "edges_per_snapshot", "num_attrs",
        "shifted_attr", "feature_dim",
    },
    "feature_shift": _PROTOCOL_COMMON | {
        "num_nodes", "num_snapshots", "edges_per_snapshot", "p_bar", "sigma",
        "iters", "fit_lr", "feature_dim",
    },
}

PROTOCOL_DEFAULTS: dict[str, dict[str, Any]] = {
    "env_synthetic": {
        "seed": 0, "num_nodes": 100, "num_snapshots": 10, "channels": 5,
        "sigma_e": 0.6, "q_bar": 0.8, "feature_dim": 8, "neighbors": 3,
        "test_snapshots": None,
    },
    "attribute_filter": {
        "seed": 0, "num_nodes": 100, "num_snapshots": 10, "edges_per_snapshot": 200,
        "num_attrs": 5, "shifted_attr": 4, "feature_dim": 32,
    },
    "feature_shift": {
        "seed": 0, "num_nodes": 100, "num_snapshots": 10, "edges_per_snapshot": 200,
        "p_bar": 0.4, "sigma": 0.05, "iters": 200, "fit_lr": 0.05, "feature_dim": 32,
    },
}

TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
SPLIT_KEYS = {"train", "val", "test"}

ALPHA_GRID = (1e-3, 1e-2, 1e-1, 1e0, 1e1)
BETA_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


def _reject_unknown(section: str, given: dict, allowed: set[str]) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(unknown)}")


def validate_config(raw: dict) -> dict:
    """Check keys and types, apply defaults, return the normalized config.

    The normalized form is what reports echo: every default is materialized
    so a report alone suffices to reproduce its run.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("top-level", raw, TOP_KEYS)
    protocol = raw.get("protocol")
    if not isinstance(protocol, dict) or "kind" not in protocol:
        raise ConfigError("config needs a 'protocol' object with a 'kind'")
    kind = protocol["kind"]
    if kind not in PROTOCOL_KEYS:
        raise ConfigError(
            f"unknown protocol kind {kind!r}; expected one of {sorted(PROTOCOL_KEYS)}"
        )
    _reject_unknown(f"protocol[{kind}]", protocol, PROTOCOL_KEYS[kind])
    norm_protocol = dict(PROTOCOL_DEFAULTS[kind])
    norm_protocol.update(protocol)

    split = raw.get("split", {"train": 6, "val": 2, "test": 2})
    if not isinstance(split, dict):
        raise ConfigError("'split' must be an object")
    _reject_unknown("split", split, SPLIT_KEYS)
    norm_split = {"train": 6, "val": 2, "test": 2}
    norm_split.update(split)
    for key, value in norm_split.items():
        if not isinstance(value, int) or value < 0:
            raise ConfigError(f"split.{key} must be a nonnegative integer")

    train = raw.get("train", {})
    if not isinstance(train, dict):
        raise ConfigError("'train' must be an object")
    _reject_unknown("train", train, TRAIN_KEYS)
    base = TrainConfig()
    norm_train = {name: getattr(base, name) for name in sorted(TRAIN_KEYS)}
    norm_train.update(train)
    if norm_train["partition_rule"] not in ("threshold", "subset"):
        raise ConfigError("train.partition_rule must be 'threshold' or 'subset'")

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("'seeds' must be a nonempty list of integers")

    no_intervention = bool(raw.get("no_intervention", False))
    if no_intervention:
        norm_train["alpha"] = 0.0

    return {
        "protocol": norm_protocol,
        "split": norm_split,
        "train": norm_train,
        "seeds": list(seeds),
        "no_intervention": no_intervention,
        "out_dir": raw.get("out_dir"),
    }


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return validate_config(raw)


def train_config_for_seed(norm: dict, seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, **norm["train"])


def sweep_grid(which: str = "alpha,beta") -> list[dict[str, float]]:
    """Enumerate the loss-weight grid: alpha in {1e-3..1e1}, beta in {1e-6..1e-2}.

    ``which`` selects the swept axes; un-swept weights stay at the config
    value (marked here by omission).
    """
    axes = [w.strip() for w in which.split(",") if w.strip()]
    for axis in axes:
        if axis not in ("alpha", "beta"):
            raise ConfigError(f"unknown sweep axis {axis!r}; expected alpha and/or beta")
    if axes == ["alpha"]:
        return [{"alpha": a} for a in ALPHA_GRID]
    if axes == ["beta"]:
        return [{"beta": b} for b in BETA_GRID]
    return [{"alpha": a, "beta": b} for a in ALPHA_GRID for b in BETA_GRID]
