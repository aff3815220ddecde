"""Run configuration: one YAML file drives every command.

Layout (all sections optional unless a command needs them):

    seed: 42
    data:
      interactions: ratings.dat
      format: movielens_dat        # or tsv
      attributes: attributes.tsv   # optional item<TAB>raw_attribute file
      group_mapping:
        over: [Drama, Comedy]
        under: [War, Sci-Fi, Western]
    model:
      variant: protomf             # or mf
      latent_dim: 32
      user_prototypes: 16
      item_prototypes: 16
      k_u: -1                      # -1 keeps all prototypes
      k_t: -1
    train:
      lambda_u: 0.0
      lambda_t: 0.0
      negatives: 10
      learning_rate: 0.001
      epochs: 10
      batch_size: 128
      weight_decay: 0.0001
    sweep:                         # Cartesian grid over these lists
      k_u: [-1]
      lambda_u: [0.0]
      k_t: [-1, 8]
      lambda_t: [0.0, 0.01]
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
from pathlib import Path

import yaml

from .data import GROUP_NEUTRAL, GROUP_OVER, GROUP_UNDER, DataError
from .model import FilterSpec
from .train import TrainConfig


class ConfigError(Exception):
    """Invalid or missing run configuration."""


def load_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def group_mapping(cfg: dict) -> dict[str, str]:
    """attribute -> group label mapping from the config's data section."""
    section = (cfg.get("data") or {}).get("group_mapping") or {}
    mapping: dict[str, str] = {}
    for group in (GROUP_OVER, GROUP_UNDER, GROUP_NEUTRAL):
        for attr in section.get(group) or []:
            mapping[str(attr)] = group
    return mapping


_MODEL_KEYS = {
    "variant": "variant",
    "latent_dim": "d",
    "user_prototypes": "l_u",
    "item_prototypes": "l_t",
}
_TRAIN_KEYS = {
    "lambda_u": "lambda_u",
    "lambda_t": "lambda_t",
    "negatives": "n_negatives_train",
    "learning_rate": "learning_rate",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "weight_decay": "weight_decay",
}


def build_train_config(cfg: dict, overrides: dict | None = None) -> TrainConfig:
    """TrainConfig from the config file, with CLI overrides applied last.

    `overrides` uses TrainConfig field names plus k_u/k_t; None values are
    ignored.
    """
    fields: dict = {}
    model = cfg.get("model") or {}
    train = cfg.get("train") or {}
    for src, dst in _MODEL_KEYS.items():
        if src in model:
            fields[dst] = model[src]
    k_u = model.get("k_u", FilterSpec().k_u)
    k_t = model.get("k_t", FilterSpec().k_t)
    for src, dst in _TRAIN_KEYS.items():
        if src in train:
            fields[dst] = train[src]
    if "seed" in cfg:
        fields["seed"] = cfg["seed"]

    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    k_u = overrides.pop("k_u", k_u)
    k_t = overrides.pop("k_t", k_t)
    fields.update(overrides)
    fields["filter"] = FilterSpec(k_u=int(k_u), k_t=int(k_t))
    try:
        config = TrainConfig(**fields)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc
    return config


def train_config_dict(config: TrainConfig) -> dict:
    """Flat JSON-friendly dict of a TrainConfig (filter as k_u/k_t)."""
    out = dataclasses.asdict(config)
    filt = out.pop("filter")
    out["k_u"] = filt["k_u"]
    out["k_t"] = filt["k_t"]
    return out


def config_hash(obj) -> str:
    """sha256 of the canonical JSON form of a config-like object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def sweep_configs(cfg: dict, base: TrainConfig) -> list[TrainConfig]:
    """Cartesian grid of (k_u, lambda_u, k_t, lambda_t) over the base config."""
    grid = cfg.get("sweep") or {}
    if not grid:
        raise ConfigError("config has no sweep section")
    k_u_values = grid.get("k_u", [base.filter.k_u])
    lambda_u_values = grid.get("lambda_u", [base.lambda_u])
    k_t_values = grid.get("k_t", [base.filter.k_t])
    lambda_t_values = grid.get("lambda_t", [base.lambda_t])
    configs = []
    for k_u, lam_u, k_t, lam_t in itertools.product(
        k_u_values, lambda_u_values, k_t_values, lambda_t_values
    ):
        configs.append(
            dataclasses.replace(
                base,
                filter=FilterSpec(k_u=int(k_u), k_t=int(k_t)),
                lambda_u=float(lam_u),
                lambda_t=float(lam_t),
            )
        )
    return configs


def data_paths(cfg: dict) -> tuple[Path, str, Path | None]:
    """(interactions path, format, attributes path or None) from the config."""
    section = cfg.get("data") or {}
    if "interactions" not in section:
        raise ConfigError("config needs data.interactions")
    fmt = section.get("format", "tsv")
    attributes = section.get("attributes")
    return (
        Path(section["interactions"]),
        str(fmt),
        Path(attributes) if attributes else None,
    )


def file_digest(path: str | Path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise DataError(f"cannot digest {path}: {exc}") from exc
