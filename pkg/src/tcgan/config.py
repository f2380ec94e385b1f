"""Strict flat key-value configuration files.

A config is a YAML mapping of scalar values whose keys mirror the target
dataclass field names. Unknown keys and wrongly typed values are errors;
absent keys keep their defaults.
"""
from __future__ import annotations

import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .data import SynthSpec
from .trainer import TrainConfig

SEED_ENV = "TCGAN_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalOptions:
    metrics: str = "fid,kid,rmse"
    space: str = "lab"
    kid_subset_size: int = 100
    kid_subsets: int = 10
    extractor_seed: int = 0
    seed: int = 0


KINDS = {"train": TrainConfig, "synth": SynthSpec, "eval": EvalOptions}


def _coerce(key: str, value, typ):
    args = typing.get_args(typ)
    if type(None) in args:
        if value is None:
            return None
        typ = next(a for a in args if a is not type(None))
    if typ is bool:
        if isinstance(value, bool):
            return value
    elif typ is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif typ is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif typ is str:
        if isinstance(value, str):
            return value
    raise ConfigError(f"config key {key!r} expects {getattr(typ, '__name__', typ)}, got {type(value).__name__} {value!r}")


def load_mapping(path: str | os.PathLike | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text())
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key-value mapping")
    return data


def build_config(kind: str, values: dict, env: typing.Mapping[str, str] | None = None):
    """Instantiate the dataclass for ``kind`` from a raw mapping."""
    cls = KINDS[kind]
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v, hints[k]) for k, v in values.items()}
    env = os.environ if env is None else env
    if env.get(SEED_ENV) not in (None, ""):
        try:
            kwargs["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path: str | os.PathLike | None, kind: str = "train",
                 env: typing.Mapping[str, str] | None = None):
    """Read ``path`` into a :class:`TrainConfig`, :class:`SynthSpec` or :class:`EvalOptions`.

    ``TCGAN_SEED`` in the environment overrides the ``seed`` key.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown config kind {kind!r}")
    return build_config(kind, load_mapping(path), env)
