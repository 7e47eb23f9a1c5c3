"""Run configuration: flat key-value text with sections.

Environment variables named QUIET_<SECTION>_<KEY> override file values,
e.g. QUIET_OPTIMIZER_LR=0.01. Serialization round-trips losslessly.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, fields

from .errors import ConfigurationError


@dataclass
class RunConfig:
    # run
    task: str = "nc"
    seed: int = 0
    epochs: int = 500
    patience: int = 50
    dtype: str = "f64"
    out_dir: str = "runs/latest"
    freeze_encoder: bool = False
    # data
    edges: str = ""
    features: str = ""
    labels: str = ""
    split_train: float = 0.6
    split_val: float = 0.2
    split_test: float = 0.2
    # encoder
    encoder_layers: int = 2
    encoder_hidden: int = 256
    encoder_dropout: float = 0.5
    # quantizer
    levels: int = 4
    codewords: int = 128
    kmeans_init: bool = True
    kmeans_iters: int = 25
    dead_code_threshold: int = 1
    revive: bool = True
    # gate
    gate_enabled: bool = True
    gate_hidden: int = 64
    temperature: float = 1.5
    # losses
    alpha: float = 0.01
    beta: float = 0.01
    eta: float = 0.25
    no_gating: bool = False
    no_diversity: bool = False
    no_balance: bool = False
    # head (nc)
    head_layers: int = 2
    head_heads: int = 4
    head_dim: int = 64
    head_mlp_ratio: int = 2
    head_batch: int = 512
    # head (lp)
    context_per_endpoint: int = 32
    alpha_restart: float = 0.15
    eps_ppr: float = 1e-5
    rpe_dim: int = 16
    att_hidden: int = 32
    lp_mlp_hidden: int = 64
    lp_epoch_edges: int = 0   # 0 = every train edge each epoch
    # optimizer
    lr: float = 0.001
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    @property
    def split_ratios(self):
        return (self.split_train, self.split_val, self.split_test)

    def validate(self) -> "RunConfig":
        if self.task not in ("nc", "lp"):
            raise ConfigurationError(f"task must be nc or lp, got {self.task!r}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigurationError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigurationError(
                f"split ratios {self.split_ratios} do not sum to 1")
        if self.levels < 1 or self.codewords < 1:
            raise ConfigurationError("levels and codewords must be positive")
        if self.temperature <= 0:
            raise ConfigurationError("gate temperature must be positive")
        if not 0 < self.alpha_restart < 1:
            raise ConfigurationError("alpha_restart must be in (0, 1)")
        if self.epochs < 1 or self.patience < 1:
            raise ConfigurationError("epochs and patience must be positive")
        if min(self.alpha, self.beta, self.eta) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        return self


_SECTIONS = {
    "run": ["task", "seed", "epochs", "patience", "dtype", "out_dir",
            "freeze_encoder"],
    "data": ["edges", "features", "labels", "split_train", "split_val",
             "split_test"],
    "encoder": ["encoder_layers", "encoder_hidden", "encoder_dropout"],
    "quantizer": ["levels", "codewords", "kmeans_init", "kmeans_iters",
                  "dead_code_threshold", "revive"],
    "gate": ["gate_enabled", "gate_hidden", "temperature"],
    "losses": ["alpha", "beta", "eta", "no_gating", "no_diversity",
               "no_balance"],
    "head": ["head_layers", "head_heads", "head_dim", "head_mlp_ratio",
             "head_batch", "context_per_endpoint", "alpha_restart", "eps_ppr",
             "rpe_dim", "att_hidden", "lp_mlp_hidden", "lp_epoch_edges"],
    "optimizer": ["lr", "weight_decay", "beta1", "beta2", "adam_eps"],
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {raw!r}") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for section, names in _SECTIONS.items():
        parser[section] = {name: _format_value(getattr(cfg, name))
                           for name in names}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_from_text(text: str, apply_env: bool = True) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"bad config syntax: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        known = set(_SECTIONS[section])
        for key, raw in parser[section].items():
            if key not in known:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            values[key] = _parse_value(key, raw)
    if apply_env:
        for section, names in _SECTIONS.items():
            for name in names:
                env_key = f"QUIET_{section.upper()}_{name.upper()}"
                if env_key in os.environ:
                    values[name] = _parse_value(name, os.environ[env_key])
    return RunConfig(**values).validate()


def load_config(path, apply_env: bool = True) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read(), apply_env=apply_env)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))
