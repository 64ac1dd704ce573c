"""Layered run configuration: defaults < YAML file < ``PROTOSEG_*`` environment < command-line flags."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .bank import DEFAULT_K, STUFF_THRESHOLD
from .inference import DEFAULT_ETA, DEFAULT_STRIDE, DEFAULT_WINDOWS, NO_BG_THRESHOLD, SHORTEST_SIDE
from .support import DEFAULT_N_SUPPORT
from .vocabulary import DEFAULT_TEMPLATE

ENV_PREFIX = "PROTOSEG_"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "bank": None,
    "cache_dir": None,
    "out": None,
    "vocabulary": None,
    "table": None,
    "dataset": None,
    "split": "val",
    "n_images": 50,
    "generator": "synthetic",
    "ensemble": ["colorhash"],
    "prefilter": True,
    "eta": DEFAULT_ETA,
    "use_bg_prototypes": True,
    "fg_threshold": NO_BG_THRESHOLD,
    "bg_pool": "kept",
    "windows": list(DEFAULT_WINDOWS),
    "stride": DEFAULT_STRIDE,
    "shortest_side": SHORTEST_SIDE,
    "n_support": DEFAULT_N_SUPPORT,
    "k_parts": DEFAULT_K,
    "stuff_threshold": STUFF_THRESHOLD,
    "template": DEFAULT_TEMPLATE,
}

# locations of inputs/outputs; they do not change results, so they stay out of the digest
PATH_KEYS = frozenset({"bank", "cache_dir", "out", "vocabulary", "table", "dataset"})


class ConfigError(ValueError):
    pass


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _as_list(value, item=str) -> list:
    if isinstance(value, str):
        value = [v for v in value.replace(" ", "").split(",") if v]
    if not isinstance(value, (list, tuple)):
        value = [value]
    return [item(v) for v in value]


def _optional(kind):
    return lambda v: None if v is None or v == "" else kind(v)


COERCE = {
    "seed": int,
    "n_images": int,
    "prefilter": _as_bool,
    "eta": int,
    "use_bg_prototypes": _as_bool,
    "fg_threshold": float,
    "windows": lambda v: _as_list(v, int),
    "stride": int,
    "shortest_side": _optional(int),
    "n_support": int,
    "k_parts": int,
    "stuff_threshold": float,
    "ensemble": _as_list,
}


def coerce(key: str, value):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown configuration key {key!r}")
    try:
        return COERCE.get(key, _optional(str))(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc


def load_file(path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def from_env(environ: Optional[Mapping[str, str]] = None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in DEFAULTS:
                out[key] = value
    return out


def resolve(file: Optional[str] = None, flags: Optional[Mapping[str, Any]] = None,
            environ: Optional[Mapping[str, str]] = None) -> dict:
    """Merge all layers; ``None`` flag values mean "not given"."""
    config = dict(DEFAULTS)
    layers = [load_file(file) if file else {}, from_env(environ),
              {k: v for k, v in (flags or {}).items() if v is not None}]
    for layer in layers:
        for key, value in layer.items():
            config[key] = coerce(key, value)
    if config["stride"] < 1 or not config["windows"] or min(config["windows"]) < 1:
        raise ConfigError("windows and stride must be positive")
    if config["n_support"] < 1 or config["k_parts"] < 1 or config["eta"] < 1:
        raise ConfigError("n_support, k_parts and eta must be >= 1")
    return config


def digest(config: Mapping[str, Any]) -> str:
    body = {k: v for k, v in config.items() if k not in PATH_KEYS}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def dump(config: Mapping[str, Any]) -> str:
    return yaml.safe_dump(dict(config), sort_keys=True)
