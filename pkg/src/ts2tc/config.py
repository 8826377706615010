"""Flat ``key = value`` configuration files mapped onto PipelineConfig.

Nested settings use dotted keys, e.g. ``vmd.k = 3`` or ``pretrain.lr = 0.01``.
Values are Python literals; bare words are read as strings.
"""
from __future__ import annotations

import ast
import dataclasses
from pathlib import Path

from .errors import DataError
from .pipeline import PipelineConfig
from .pretext import TrainConfig
from .spectrogram import StftConfig
from .vmd import VmdConfig

NESTED = {"vmd": VmdConfig, "stft": StftConfig, "pretrain": TrainConfig, "twrg": TrainConfig,
          "downstream": TrainConfig}
_TUPLES = {"patch", "decoder_hidden", "split", "seeds"}


def _literal(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise DataError(f"config line {lineno}: empty key")
        out[key] = _literal(value)
    return out


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such config file: {p}")
    return parse_config_text(p.read_text())


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def build_config(values: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Apply flat (possibly dotted) overrides onto ``base``."""
    base = base or PipelineConfig()
    top: dict = {}
    nested: dict[str, dict] = {}
    for key, value in values.items():
        if "." in key:
            group, sub = key.split(".", 1)
            if group not in NESTED or sub not in _field_names(NESTED[group]):
                raise DataError(f"unknown config key {key!r}")
            nested.setdefault(group, {})[sub] = value
        elif key in NESTED and isinstance(value, dict):
            for sub, v in value.items():
                if sub not in _field_names(NESTED[key]):
                    raise DataError(f"unknown config key {key}.{sub}")
            nested.setdefault(key, {}).update(value)
        elif key in _field_names(PipelineConfig):
            top[key] = tuple(value) if key in _TUPLES and isinstance(value, (list, tuple)) else value
        else:
            raise DataError(f"unknown config key {key!r}")
    for group, sub in nested.items():
        try:
            top[group] = dataclasses.replace(getattr(base, group), **sub)
        except TypeError as exc:
            raise DataError(f"bad value in [{group}]: {exc}") from None
    try:
        return dataclasses.replace(base, **top)
    except TypeError as exc:
        raise DataError(f"bad config value: {exc}") from None


def config_from_dict(d: dict) -> PipelineConfig:
    """Inverse of ``PipelineConfig.as_dict`` (as echoed in checkpoints and manifests)."""
    return build_config(d)
