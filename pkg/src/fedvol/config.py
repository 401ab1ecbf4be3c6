"""Flat ``key = value`` scenario files.

Lines are ``key = value``; ``#`` starts a comment anywhere on a line. Keys
are exact (see ``KEYS``); unknown or repeated keys are errors. The
environment variable ``FEDVOL_SEED`` overrides ``seed`` when set.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace
from datetime import date
from typing import Optional

from .data import FeatureConfig, GarchParams
from .errors import ConfigError, FedVolError
from .federation import RoundConfig
from .model import ModelConfig
from .privacy import DpConfig

SCENARIOS = ("iid", "quarters", "hetero", "dp", "transfer", "centralized", "local")
SEED_ENV = "FEDVOL_SEED"


def _bool(text):
    t = text.lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _float(text):
    t = text.lower()
    if t in ("inf", "infinity"):
        return math.inf
    return float(text)


def _sources(text):
    """``synthetic`` or a comma list of ``market_id:path``."""
    if text.strip().lower() == "synthetic":
        return "synthetic"
    out = []
    for item in text.split(","):
        mid, sep, path = item.strip().partition(":")
        if not sep or not mid.strip() or not path.strip():
            raise ValueError(f"expected market_id:path, got {item.strip()!r}")
        out.append((mid.strip(), path.strip()))
    return tuple(out)


def _source(text):
    src = _sources(text)
    if src != "synthetic" and len(src) != 1:
        raise ValueError("expected a single market_id:path")
    return src if src == "synthetic" else src[0]


def _scenario(text):
    if text not in SCENARIOS:
        raise ValueError(f"unknown scenario {text!r}; choose from {', '.join(SCENARIOS)}")
    return text


def _optional_int(text):
    return None if text.lower() == "none" else int(text)


# key -> parser. Defaults live on ScenarioConfig.
KEYS = {
    "scenario": _scenario,
    "data": _sources,
    "target": _source,
    "seed": int,
    "n_clients": int,
    "rounds": int,
    "local_epochs": int,
    "batch_size": int,
    "hidden_dim": int,
    "horizon": int,
    "clamp_eps": _float,
    "lr": _float,
    "beta1": _float,
    "beta2": _float,
    "adam_eps": _float,
    "smooth_window": int,
    "vol_window": int,
    "train_fraction": _float,
    "cumulative_feature": _bool,
    "hetero_mode": str,
    "reset_optimizer": _bool,
    "dp_clip": _float,
    "dp_sigma": _float,
    "dp_seed": _optional_int,
    "transfer_fraction": _float,
    "finetune_epochs": int,
    "scratch_epochs": _optional_int,
    "synth_days": int,
    "synth_omega": _float,
    "synth_alpha": _float,
    "synth_beta": _float,
    "synth_seasonal_amp": _float,
    "synth_start": date.fromisoformat,
    "synth_seed": _optional_int,
    "output": str,
    "checkpoint": str,
}
REQUIRED = ("scenario", "data")

# scenario -> overrides of the generic defaults (applied only when the key is absent)
SCENARIO_DEFAULTS = {
    "quarters": {"n_clients": 4},
    "hetero": {"n_clients": 4, "rounds": 48},
    "transfer": {"n_clients": 2},
}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    data: object  # "synthetic" or tuple of (market_id, path)
    target: object = None
    seed: int = 0
    n_clients: int = 3
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 32
    hidden_dim: int = 16
    horizon: int = 5
    clamp_eps: float = 1e-7
    lr: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    smooth_window: int = 5
    vol_window: int = 5
    train_fraction: float = 0.8
    cumulative_feature: bool = False
    hetero_mode: str = "round"
    reset_optimizer: bool = False
    dp_clip: float = 1.0
    dp_sigma: float = 1.0
    dp_seed: Optional[int] = None
    transfer_fraction: float = 0.1
    finetune_epochs: int = 30
    scratch_epochs: Optional[int] = None
    synth_days: int = 2000
    synth_omega: float = 5e-6
    synth_alpha: float = 0.10
    synth_beta: float = 0.85
    synth_seasonal_amp: float = 0.5
    synth_start: date = date(2015, 1, 1)
    synth_seed: Optional[int] = None
    output: str = "metrics.csv"
    checkpoint: Optional[str] = None
    base_dir: Optional[str] = None  # relative data paths resolve against this

    @property
    def synthetic(self):
        return self.data == "synthetic"

    def features(self) -> FeatureConfig:
        return FeatureConfig(self.horizon, self.smooth_window, self.vol_window,
                             self.train_fraction, self.cumulative_feature)

    def model(self) -> ModelConfig:
        return ModelConfig(self.features().n_features, self.hidden_dim, self.horizon, self.clamp_eps)

    def dp(self) -> Optional[DpConfig]:
        if self.scenario != "dp":
            return None
        return DpConfig(self.dp_clip, self.dp_sigma, self.seed if self.dp_seed is None else self.dp_seed)

    def rounds_config(self, **overrides) -> RoundConfig:
        kw = dict(
            n_clients=self.n_clients, rounds=self.rounds, local_epochs=self.local_epochs,
            batch_size=self.batch_size, base_seed=self.seed, lr=self.lr, beta1=self.beta1,
            beta2=self.beta2, adam_eps=self.adam_eps, hetero=self.scenario == "hetero",
            hetero_mode=self.hetero_mode, dp=self.dp(), reset_optimizer=self.reset_optimizer,
        )
        kw.update(overrides)
        return RoundConfig(**kw)

    def garch(self) -> GarchParams:
        return GarchParams(self.synth_omega, self.synth_alpha, self.synth_beta)

    @property
    def data_seed(self):
        return self.seed if self.synth_seed is None else self.synth_seed

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed)


def _validate(cfg: ScenarioConfig, given: dict, lines: dict):
    def err(msg, key):
        raise ConfigError(msg, key=key, line=lines.get(key))

    if cfg.scenario == "quarters" and cfg.n_clients != 4:
        err("scenario 'quarters' requires n_clients = 4 (one per calendar quarter)", "n_clients")
    if cfg.scenario == "transfer":
        n_train = 2 if cfg.synthetic else len(cfg.data)
        if n_train < 2:
            err("scenario 'transfer' needs at least 2 training markets", "data")
        if not cfg.synthetic and cfg.target is None:
            err("scenario 'transfer' needs a target market", "target")
        if cfg.n_clients != n_train:
            err(f"scenario 'transfer' uses one client per training market ({n_train})", "n_clients")
    elif not cfg.synthetic and len(cfg.data) != 1:
        err(f"scenario {cfg.scenario!r} takes exactly one market", "data")
    checks = [
        ("n_clients", cfg.n_clients >= 1, "must be >= 1"),
        ("rounds", cfg.rounds >= 1, "must be >= 1"),
        ("local_epochs", cfg.local_epochs >= 1, "must be >= 1"),
        ("batch_size", cfg.batch_size >= 1, "must be >= 1"),
        ("hidden_dim", cfg.hidden_dim >= 1, "must be >= 1"),
        ("horizon", cfg.horizon >= 1, "must be >= 1"),
        ("lr", cfg.lr >= 0, "must be >= 0"),
        ("train_fraction", 0 < cfg.train_fraction < 1, "must lie in (0, 1)"),
        ("transfer_fraction", 0 < cfg.transfer_fraction <= 1, "must lie in (0, 1]"),
        ("finetune_epochs", cfg.finetune_epochs >= 0, "must be >= 0"),
        ("dp_clip", cfg.dp_clip > 0, "must be > 0"),
        ("dp_sigma", cfg.dp_sigma >= 0 and math.isfinite(cfg.dp_sigma), "must be finite and >= 0"),
        ("hetero_mode", cfg.hetero_mode in ("round", "epoch"), "must be 'round' or 'epoch'"),
        ("synth_days", cfg.synth_days >= 30, "must be >= 30"),
        ("synth_seasonal_amp", cfg.synth_seasonal_amp >= 0, "must be >= 0"),
        ("clamp_eps", 0 < cfg.clamp_eps < 0.5, "must lie in (0, 0.5)"),
    ]
    for key, ok, msg in checks:
        if not ok:
            err(msg, key)
    if cfg.synth_alpha + cfg.synth_beta >= 1:
        err("synth_alpha + synth_beta must be < 1", "synth_beta" if "synth_beta" in given else "synth_alpha")


def parse_config(text: str, env: Optional[dict] = None) -> ScenarioConfig:
    env = os.environ if env is None else env
    given, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        if key not in KEYS:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in given:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", key=key, line=lineno)
        try:
            given[key] = KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r}: {exc}", key=key, line=lineno) from None
        lines[key] = lineno

    for key in REQUIRED:
        if key not in given:
            raise ConfigError("missing required key", key=key)
    if env.get(SEED_ENV):
        try:
            given["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None

    values = dict(SCENARIO_DEFAULTS.get(given["scenario"], {}))
    values.update(given)
    cfg = ScenarioConfig(**values)
    _validate(cfg, given, lines)
    return cfg


def load_config(path, env: Optional[dict] = None) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config(fh.read(), env)
    return replace(cfg, base_dir=os.path.dirname(os.path.abspath(path)))


def config_keys() -> list:
    """(key, default) pairs in declaration order, for documentation."""
    return [(f.name, f.default) for f in fields(ScenarioConfig) if f.name in KEYS]
