"""Run configuration: loading, defaults, overrides and the canonical hash."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

CACHE_ENV = "GEOXPLAIN_CACHE"
SECTIONS = (
    "run",
    "ingest",
    "classifier",
    "attribution",
    "segmentation",
    "selection",
    "faithfulness",
    "report",
    "sweep",
)
# keys that never change results and therefore stay out of the hash
_UNHASHED = {("run", "workers"), ("run", "output_root")}
# config keys holding file paths, resolved against the config file directory
_PATH_KEYS = (
    ("ingest", "manifest"),
    ("classifier", "weights"),
    ("classifier", "external", "module"),
    ("classifier", "external", "weights"),
    ("segmentation", "concepts_file"),
    ("segmentation", "external", "module"),
    ("segmentation", "external", "weights"),
    ("run", "output_root"),
)


def default_config_text() -> str:
    return resources.files("geoxplain").joinpath("configs/default.yaml").read_text()


def default_config() -> dict:
    return yaml.safe_load(default_config_text())


def _merge(base: dict, override: dict, trail: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{trail}.{key}" if trail else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def merge_config(overrides: dict | None) -> dict:
    """Overlay a partial config on the shipped defaults. Unknown keys raise."""
    return _merge(default_config(), overrides or {})


def _get(cfg: dict, path: tuple) -> Any:
    node = cfg
    for key in path:
        node = node[key]
    return node


def _set(cfg: dict, path: tuple, value: Any) -> None:
    node = cfg
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value


def load_config(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file does not parse: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    cfg = merge_config(raw)
    base = path.resolve().parent
    for key_path in _PATH_KEYS:
        value = _get(cfg, key_path)
        if value is not None and not os.path.isabs(value):
            _set(cfg, key_path, os.path.normpath(base / value))
    validate_config(cfg)
    return cfg


def set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    path = tuple(dotted.split("."))
    try:
        _get(cfg, path[:-1])[path[-1]]
    except (KeyError, TypeError):
        raise ConfigError(f"unknown config key: {dotted}") from None
    _set(cfg, path, value)


def as_list(value: Any) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


def validate_config(cfg: dict) -> None:
    try:
        ingest = cfg["ingest"]
        if int(ingest["side"]) < 1:
            raise ConfigError("ingest.side must be positive")
        if ingest["normalization"] not in ("raw_0_1", "standardized"):
            raise ConfigError("ingest.normalization must be raw_0_1 or standardized")
        if len(ingest["mean"]) != 3 or len(ingest["std"]) != 3:
            raise ConfigError("ingest.mean/std need three channels")
        if any(s <= 0 for s in ingest["std"]):
            raise ConfigError("ingest.std entries must be positive")
        if cfg["classifier"]["backend"] not in ("toy-cnn", "stub", "external"):
            raise ConfigError(f"unknown classifier.backend {cfg['classifier']['backend']!r}")
        p = float(cfg["attribution"]["p"])
        if not 0 < p <= 100:
            raise ConfigError("attribution.p must be in (0, 100]")
        sel = cfg["selection"]
        if not 0 <= sel["iou_threshold"] <= 1 or not 0 <= sel["containment_threshold"] <= 1:
            raise ConfigError("selection thresholds must lie in [0, 1]")
        if sel["area_ratio_gate"] < 1 or sel["pad_fraction"] < 0:
            raise ConfigError("selection.area_ratio_gate >= 1 and pad_fraction >= 0 required")
        if int(cfg["faithfulness"]["repeats"]) < 0:
            raise ConfigError("faithfulness.repeats must be >= 0")
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc


def canonical_json(cfg: dict) -> str:
    hashed = copy.deepcopy(cfg)
    for section, key in _UNHASHED:
        hashed.get(section, {}).pop(key, None)
    return json.dumps(hashed, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def output_root(cfg: dict) -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path(cfg["run"]["output_root"])


def run_dir(cfg: dict) -> Path:
    return output_root(cfg) / f"run-{config_hash(cfg)[:12]}"
