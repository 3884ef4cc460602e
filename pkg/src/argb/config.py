"""Run configuration: one JSON document with a section per module.

Every key has a default; a user file only needs the keys it changes.
Unknown keys are rejected with their dotted path.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from argb.training import AETrainConfig


class ConfigError(ValueError):
    pass


def _ae_defaults() -> dict:
    return AETrainConfig().to_dict()


DEFAULTS: dict = {
    "data": {"src": None, "size": 480, "stride": 240, "kind": "gradients", "count": 8, "synth_size": 64, "cell": 8, "seed": 0, "patches": None},
    "autoencoder": _ae_defaults(),
    "loss": {"space": "rgb", "kind": "l1", "weight": 1.0, "charbonnier_eps": 1e-3},
    "restorer": {
        "steps": 5000,
        "batch": 4,
        "lr": 1e-4,
        "grad_clip": None,
        "sigma": 0.1,
        "patch_size": 64,
        "width": 64,
        "depth": 8,
        "val_every": 250,
        "seed": 0,
    },
    "analysis": {
        "sigmas": [0.0, 0.02, 0.05, 0.1],
        "n_samples": 100,
        "inversion_steps": 50,
        "inversion_lr": 0.1,
        "mix_steps": 300,
        "mix_lr": 1.0,
        "subsample": 1,
        "expert": 0,
        "channel": 0,
        "filter_size": 32,
        "filter_steps": 200,
        "filter_lr": 0.05,
        "pixel_stride": 1,
        "crop": 64,
        "seed": 0,
    },
}

# value types used when parsing "--set key=value" strings
_FLOAT_KEYS = {"lr", "initial_lr", "eps", "lambda_balance", "noise_std", "weight", "charbonnier_eps", "sigma", "grad_clip", "inversion_lr", "mix_lr", "filter_lr"}


def merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be an object")
            out[key] = merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return merge(cfg, user)


def _parse_value(key: str, raw: str):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if key in _FLOAT_KEYS and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return value


def set_key(cfg: dict, dotted: str, value) -> dict:
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {'.'.join(parts[: i + 1])}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[parts[-1]] = _parse_value(parts[-1], value) if isinstance(value, str) else value
    return cfg


def apply_overrides(cfg: dict, assignments: list[str]) -> dict:
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_key(cfg, key.strip(), raw.strip())
    return cfg


def autoencoder_config(cfg: dict) -> AETrainConfig:
    try:
        return AETrainConfig.from_dict(cfg["autoencoder"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"autoencoder: {exc}") from exc


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def json_schema() -> dict:
    """A JSON Schema describing the run configuration (types taken from the defaults)."""

    def node(value):
        if isinstance(value, dict):
            return {"type": "object", "additionalProperties": False, "properties": {k: node(v) for k, v in value.items()}}
        if isinstance(value, bool):
            return {"type": "boolean"}
        if isinstance(value, int):
            return {"type": "integer"}
        if isinstance(value, float):
            return {"type": "number"}
        if isinstance(value, list):
            return {"type": "array"}
        if isinstance(value, str):
            return {"type": "string"}
        return {}

    schema = node(DEFAULTS)
    schema["$schema"] = "http://json-schema.org/draft-07/schema#"
    schema["title"] = "argb run configuration"
    ae = schema["properties"]["autoencoder"]["properties"]
    ae["balance_form"]["enum"] = ["switch", "printed"]
    for key in ("src", "patches"):
        schema["properties"]["data"]["properties"][key] = {"type": ["string", "null"]}
    schema["properties"]["restorer"]["properties"]["grad_clip"] = {"type": ["number", "null"]}
    schema["properties"]["loss"]["properties"]["space"]["enum"] = ["rgb", "argb"]
    schema["properties"]["loss"]["properties"]["kind"]["enum"] = ["l1", "l2", "psnr", "charbonnier", "edge"]
    return schema
