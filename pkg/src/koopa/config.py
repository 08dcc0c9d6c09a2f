"""Run configuration: flat key=value files with optional [section] grouping.

Sections are purely organizational; keys live in one flat namespace and must
be unique across the whole file. ``--set key=value`` overrides file values,
and explicit command flags override both. The fully resolved mapping is
echoed into the output directory for reproducibility.
"""
from __future__ import annotations

import os
from dataclasses import fields
from typing import Mapping

from .errors import ConfigError
from .model import ModelConfig


def parse_config_file(path: str) -> dict[str, str]:
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out: dict[str, str] = {}
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{line_no}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{line_no}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def apply_overrides(config: dict[str, str], pairs: list[str] | None) -> dict[str, str]:
    out = dict(config)
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        if not key:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


class RunConfig:
    """Typed access over the resolved flat mapping."""

    def __init__(self, values: Mapping[str, str]):
        self.values = dict(values)

    def has(self, key: str) -> bool:
        return key in self.values

    def get_str(self, key: str, default: str | None = None) -> str:
        if key in self.values:
            return self.values[key]
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default

    def _convert(self, key: str, caster, kind: str):
        raw = self.values[key]
        try:
            return caster(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r} must be {kind}, got {raw!r}") from None

    def get_int(self, key: str, default: int | None = None) -> int:
        if key not in self.values:
            if default is None:
                raise ConfigError(f"missing required config key {key!r}")
            return default
        return self._convert(key, int, "an integer")

    def get_float(self, key: str, default: float | None = None) -> float:
        if key not in self.values:
            if default is None:
                raise ConfigError(f"missing required config key {key!r}")
            return default
        return self._convert(key, float, "a number")

    def get_bool(self, key: str, default: bool) -> bool:
        if key not in self.values:
            return default
        raw = self.values[key].lower()
        if raw in ("true", "1", "yes", "on"):
            return True
        if raw in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r} must be a boolean, got {self.values[key]!r}")

    def get_int_tuple(self, key: str, default: tuple[int, ...]) -> tuple[int, ...]:
        if key not in self.values:
            return default
        raw = self.values[key]
        try:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"config key {key!r} must be comma-separated integers, got {raw!r}") from None


def build_model_config(run: RunConfig, variates: int) -> ModelConfig:
    """Assemble the model hyperparameters; lookback defaults to 2 * horizon."""
    defaults = {f.name: f.default for f in fields(ModelConfig)}
    horizon = run.get_int("horizon")
    kwargs = dict(
        horizon=horizon,
        variates=variates,
        lookback=run.get_int("lookback", 2 * horizon),
        blocks=run.get_int("blocks", defaults["blocks"]),
        embed_dim=run.get_int("embed_dim", defaults["embed_dim"]),
        alpha=run.get_float("alpha", defaults["alpha"]),
        hidden_dims=run.get_int_tuple("hidden_dims", (128, 128)),
        lr=run.get_float("lr", defaults["lr"]),
        batch_size=run.get_int("batch_size", defaults["batch_size"]),
        max_epochs=run.get_int("max_epochs", defaults["max_epochs"]),
        patience=run.get_int("patience", defaults["patience"]),
        seed=run.get_int("seed", defaults["seed"]),
        normalize=run.get_bool("normalize", True),
        activation=run.get_str("activation", defaults["activation"]),
        detach_kvar=run.get_bool("detach_kvar", False),
        kinv_perturb=run.get_float("kinv_perturb", defaults["kinv_perturb"]),
    )
    if run.has("segment_len"):
        kwargs["segment_len"] = run.get_int("segment_len")
    try:
        return ModelConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_threads(flag_value: int | None) -> int:
    if flag_value is not None:
        return max(1, flag_value)
    env = os.environ.get("KOOPA_THREADS", "")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"KOOPA_THREADS must be an integer, got {env!r}") from None
    return 1


def echo_config(values: Mapping[str, str], path: str) -> None:
    with open(path, "w") as fh:
        for key in sorted(values):
            fh.write(f"{key}={values[key]}\n")
