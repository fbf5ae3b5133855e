"""Flat key-value configuration files.

One `key = value` pair per line; blank lines and '#' comments ignored.
Keys cover the model configuration (block_layers, k0, groups,
condense_factor, ...) and the training settings (epochs, batch_size,
lr0, lambda_lasso, seed, fc_condense_epoch, ...). block_layers takes a
comma-separated list. Booleans accept true/false/1/0/yes/no. A config
argument that names no file is treated as a preset name.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .arch import ModelConfig, preset
from .errors import ConfigError
from .training import TrainSettings

_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainSettings)}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: {raw!r} is not a boolean")


def _convert(key: str, raw: str):
    if key == "block_layers":
        try:
            return tuple(int(p) for p in raw.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"block_layers: {raw!r} is not an integer list") from None
    if raw.lower() in ("none", ""):
        return None
    field = _MODEL_FIELDS.get(key) or _TRAIN_FIELDS.get(key)
    tname = str(field.type)
    try:
        if "bool" in tname:
            return _parse_bool(raw, key)
        if "int" in tname:
            return int(raw)
        if "float" in tname:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str, origin: str = "<config>") -> tuple[dict, dict]:
    """Split a key-value document into (model kwargs, training kwargs)."""
    model_kw: dict = {}
    train_kw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{origin}:{lineno}: expected key = value, got {body!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key in _MODEL_FIELDS:
            model_kw[key] = _convert(key, raw)
        elif key in _TRAIN_FIELDS:
            train_kw[key] = _convert(key, raw)
        else:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
    return model_kw, train_kw


def load_config(name_or_path: str) -> tuple[ModelConfig, TrainSettings]:
    """Resolve a preset name or a key-value file into a model config and
    training settings. Files may start from a preset via `preset = name`."""
    path = Path(name_or_path)
    if not path.is_file():
        return preset(name_or_path), TrainSettings()
    text = path.read_text()
    base = ModelConfig()
    preset_line = None
    for line in text.splitlines():
        body = line.split("#", 1)[0].strip()
        if body.startswith("preset"):
            key, _, raw = body.partition("=")
            if key.strip() == "preset":
                preset_line = raw.strip()
    if preset_line is not None:
        base = preset(preset_line)
        text = "\n".join(
            l for l in text.splitlines()
            if l.split("#", 1)[0].strip().split("=")[0].strip() != "preset"
        )
    model_kw, train_kw = parse_config_text(text, origin=str(path))
    try:
        model = base.with_overrides(**model_kw)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e
    settings = TrainSettings(**train_kw)
    return model, settings
