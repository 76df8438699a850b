"""Flat ``section.key = value`` experiment configuration.

Lines starting with ``#`` and blank lines are ignored.  Every key has a
default; unknown keys, malformed values and out-of-range values raise
:class:`ConfigError` naming the key and its line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .acquisition import LINE6_READINGS, STRATEGIES
from .data import FEATURE_DISTS, NOISE_PROFILES
from .model import DROPOUT_MODES, LOSS_KINDS

ENV_SEED = "BAYESAL_SEED"
ENV_OUTDIR = "BAYESAL_OUTDIR"
RESOLVED_NAME = "config.resolved"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    data_source: str = "synthetic"  # "synthetic" or "file"
    data_path: str = ""
    data_test_path: str = ""
    data_test_fraction: float = 0.2
    data_n: int = 4000
    data_n_test: int = 1000
    data_D: int = 16
    data_K: int = 21
    data_noise_profile: str = "ramp"
    data_noise_sd: float = 0.05
    data_feature_dist: str = "clusters"
    data_target_fn_seed: int = 0
    # model
    model_hidden: tuple = (64, 64, 64)
    model_dropout_mode: str = "A"
    model_dropout_rate: float = 0.1
    model_loss_kind: str = "heteroscedastic"
    model_alpha_per: str = "joint"
    model_M: int = 40
    # training
    train_lr: float = 1e-3
    train_batch: int = 128
    train_epochs: int = 300
    # active learning
    al_budget: int = 100
    al_seed_size: int = -1  # -1: same as the budget
    al_stages: int = 10
    al_subset_fraction: float = 0.1
    al_trials: int = 5
    al_strategies: tuple = STRATEGIES
    al_eta: float = 0.3
    al_line6: str = "lb_center"
    al_share_subsets: bool = True
    # seeds / output
    seed_master: int = 0
    output_dir: str = "results"

    @property
    def seed_size(self) -> int:
        return self.al_budget if self.al_seed_size < 0 else self.al_seed_size


def _key(name: str) -> str:
    section, _, rest = name.partition("_")
    return f"{section}.{rest}"


KEYS = {_key(f.name): f for f in fields(ExperimentConfig)}
DEFAULTS = ExperimentConfig()

_CHOICES = {
    "data_source": ("synthetic", "file"),
    "data_noise_profile": NOISE_PROFILES,
    "data_feature_dist": FEATURE_DISTS,
    "model_dropout_mode": DROPOUT_MODES,
    "model_loss_kind": LOSS_KINDS,
    "model_alpha_per": ("joint", "coordinate"),
    "al_line6": LINE6_READINGS,
}

_MINIMA = {
    "data_n": 1, "data_n_test": 1, "data_D": 1, "data_K": 1,
    "model_M": 1, "train_batch": 1, "train_epochs": 1,
    "al_budget": 0, "al_seed_size": -1, "al_stages": 0, "al_trials": 1,
}


def _parse_value(name: str, text: str):
    default = getattr(DEFAULTS, name)
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if name == "model_hidden":
            return tuple(int(p) for p in parts)
        return tuple(parts)
    return text


def _check(cfg: ExperimentConfig, name: str):
    """Raise ValueError if ``name`` holds an out-of-range value."""
    value = getattr(cfg, name)
    if name in _CHOICES and value not in _CHOICES[name]:
        raise ValueError(f"must be one of {', '.join(_CHOICES[name])}, got {value!r}")
    if name in _MINIMA and value < _MINIMA[name]:
        raise ValueError(f"must be >= {_MINIMA[name]}, got {value}")
    if name == "model_dropout_rate" and not 0.0 <= value < 1.0:
        raise ValueError(f"must lie in [0, 1), got {value}")
    if name == "train_lr" and not value > 0:
        raise ValueError(f"must be > 0, got {value}")
    if name == "al_subset_fraction" and not 0.0 < value <= 1.0:
        raise ValueError(f"must lie in (0, 1], got {value}")
    if name == "data_test_fraction" and not 0.0 < value < 1.0:
        raise ValueError(f"must lie in (0, 1), got {value}")
    if name == "al_eta" and not value >= 0:
        raise ValueError(f"must be >= 0, got {value}")
    if name == "model_hidden" and (not value or min(value) < 1):
        raise ValueError("must list at least one positive layer width")
    if name == "al_strategies":
        if not value:
            raise ValueError("must list at least one strategy")
        bad = [s for s in value if s not in STRATEGIES]
        if bad:
            raise ValueError(f"unknown strategy {bad[0]!r}; expected some of {', '.join(STRATEGIES)}")
        if len(set(value)) != len(value):
            raise ValueError("strategies must not repeat")


def parse_config_text(text: str, source: str = "<config>", env=None) -> ExperimentConfig:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        name = KEYS[key].name
        if name in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[name] = _parse_value(name, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: key {key!r}: {exc}") from None
        lines[name] = lineno

    env = os.environ if env is None else env
    for var, name in ((ENV_SEED, "seed_master"), (ENV_OUTDIR, "output_dir")):
        if env.get(var):
            try:
                values[name] = _parse_value(name, env[var])
            except ValueError as exc:
                raise ConfigError(f"environment {var}: {exc}") from None
            lines[name] = f"${var}"

    cfg = replace(DEFAULTS, **values)
    for name in values:
        try:
            _check(cfg, name)
        except ValueError as exc:
            where = lines[name]
            loc = f"{source}:{where}" if isinstance(where, int) else f"environment {where}"
            raise ConfigError(f"{loc}: key {_key(name)!r}: {exc}") from None
    if cfg.data_source == "file" and not cfg.data_path:
        raise ConfigError(f"{source}: key 'data.path' is required when data.source = file")
    return cfg


def parse_config(path, env=None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path), env)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def emit_config(cfg: ExperimentConfig) -> str:
    """Every key with its resolved value, in declaration order."""
    return "".join(f"{key} = {_format(getattr(cfg, f.name))}\n" for key, f in KEYS.items())
