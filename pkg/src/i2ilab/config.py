"""Run configuration: one JSON file, schema-validated, overridable by flags.

Unknown keys are rejected at every nesting level so a typo cannot silently
fall back to a default.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

from .backbone import BackboneConfig
from .training import Hyper


class ConfigError(ValueError):
    pass


# (type, default); None default means optional
SCHEMA: dict[str, dict[str, tuple]] = {
    "backbone": {
        "d_model": (int, 64),
        "n_heads": (int, 4),
        "n_enc_layers": (int, 2),
        "n_dec_layers": (int, 2),
        "d_ff": (int, 128),
        "vocab_size": (int, 64),
        "max_src_len": (int, 32),
        "max_tgt_len": (int, 4),
        "feature_dim": (int, 16),
        "dropout": (float, 0.0),
    },
    "tasks": {
        "suite_seed": (int, 0),
        "train_size": (int, 2000),
        "val_size": (int, 500),
    },
    "pretrain": {
        "seed": (int, 0),
        "corpus_size": (int, 3000),
        "corpus_val_size": (int, 500),
        "epochs": (int, 6),
    },
    "hyper": {
        "lr": (float, 1e-3),
        "batch_size": (int, 64),
        "bottleneck": (int, 8),
        "epochs_improvise": (int, 4),
        "epochs_initialize": (int, 4),
        "epochs_train": (int, 4),
        "patience": (int, 3),
        "eval_subset": (int, 250),
    },
    "run": {
        "algo": (str, "i2i"),
        "variant": (str, None),
        "order": (int, 1),
        "seed": (int, 1),
        "out_dir": (str, None),
    },
}


def default_config() -> dict:
    return {sec: {k: d for k, (_, d) in fields.items()}
            for sec, fields in SCHEMA.items()}


def _check_type(path: str, value: Any, typ: type) -> Any:
    if value is None:
        return None
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, typ) or isinstance(value, bool) and typ is not bool:
        raise ConfigError(f"config key {path} must be {typ.__name__}, "
                          f"got {type(value).__name__}")
    return value


def validate_config(raw: dict) -> dict:
    """Merge `raw` over the defaults; reject unknown keys and bad types."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    cfg = default_config()
    for sec, body in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section {sec!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {sec!r} must be an object")
        for key, value in body.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown config key {sec}.{key}")
            typ, _ = SCHEMA[sec][key]
            cfg[sec][key] = _check_type(f"{sec}.{key}", value, typ)
    variant = cfg["run"]["variant"]
    if (variant is not None) != (cfg["run"]["algo"] == "i2i"):
        raise ConfigError("run.variant must be set exactly when run.algo is i2i")
    return cfg


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return validate_config({})
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}")
    return validate_config(raw)


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one --set KEY=VALUE override (dotted key, JSON-parsed value)."""
    if "=" not in assignment:
        raise ConfigError(f"--set needs KEY=VALUE, got {assignment!r}")
    key, _, value = assignment.partition("=")
    parts = key.strip().split(".")
    if len(parts) != 2 or parts[0] not in SCHEMA or parts[1] not in SCHEMA[parts[0]]:
        raise ConfigError(f"unknown config key {key!r}")
    sec, name = parts
    typ, _ = SCHEMA[sec][name]
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value  # bare strings allowed
    cfg[sec][name] = _check_type(key, parsed, typ)


def backbone_config(cfg: dict) -> BackboneConfig:
    return BackboneConfig(**cfg["backbone"])


def hyper_config(cfg: dict) -> Hyper:
    return Hyper(**cfg["hyper"])
