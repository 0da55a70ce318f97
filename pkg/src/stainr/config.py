"""Run configuration: defaults, config-file parsing, and CLI overrides.

Config files are flat UTF-8 `key = value` lines; `#` starts a comment
(whole line or trailing). Keys address every TrainConfig and ModelConfig
field by name. Precedence: defaults < file < --set flags < STAINR_SEED.
"""

from __future__ import annotations

import os

from .errors import ConfigError
from .model import ModelConfig

_MODEL_FIELD_TYPES = {
    "levels": int,
    "blocks_per_level": "int_tuple",
    "base_channels": int,
    "heads_per_level": "int_tuple",
    "n_part": int,
    "n_ins": int,
    "n_sem": int,
    "sparsity_threshold": "optional_float",
    "enable_docmemory": bool,
    "enable_srtransformer": bool,
    "memory_residual": bool,
    "ffn_expansion": float,
    "q_window": int,
    "overlap_ratio": float,
}

_TRAIN_FIELD_TYPES = {
    "batch_size": int,
    "lr_max": float,
    "lr_min": float,
    "total_steps": int,
    "alpha": float,
    "train_resolution": int,
    "eval_resolution": int,
    "seed": int,
    "data_dir": str,
    "out_dir": str,
    "checkpoint_interval": int,
    "mixup_alpha": float,
    "mixup_prob": float,
    "test_fraction": float,
}


class TrainConfig:
    """Desk-scale defaults; full-scale values stay reachable via config."""

    def __init__(self, batch_size=4, lr_max=2e-4, lr_min=1e-6, total_steps=2000,
                 alpha=0.2, train_resolution=64, eval_resolution=256, seed=0,
                 data_dir="data", out_dir="runs/exp", checkpoint_interval=500,
                 mixup_alpha=1.2, mixup_prob=0.25, test_fraction=0.1,
                 model: ModelConfig | None = None):
        self.batch_size = int(batch_size)
        self.lr_max = float(lr_max)
        self.lr_min = float(lr_min)
        self.total_steps = int(total_steps)
        self.alpha = float(alpha)
        self.train_resolution = int(train_resolution)
        self.eval_resolution = int(eval_resolution)
        self.seed = int(seed)
        self.data_dir = str(data_dir)
        self.out_dir = str(out_dir)
        self.checkpoint_interval = int(checkpoint_interval)
        self.mixup_alpha = float(mixup_alpha)
        self.mixup_prob = float(mixup_prob)
        self.test_fraction = float(test_fraction)
        self.model = model if model is not None else ModelConfig()
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr_min < self.lr_max:
            raise ConfigError(f"need lr_min < lr_max, got {self.lr_min} >= {self.lr_max}")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        m = self.model.spatial_multiple
        if self.train_resolution % m:
            raise ConfigError(
                f"train_resolution {self.train_resolution} not divisible by {m} "
                f"(2^(levels-1) * q_window)")
        if self.eval_resolution % m:
            raise ConfigError(f"eval_resolution {self.eval_resolution} not divisible by {m}")
        if not 0.0 <= self.mixup_prob <= 1.0:
            raise ConfigError("mixup_prob must sit in [0,1]")
        if self.mixup_alpha <= 0:
            raise ConfigError("mixup_alpha must be > 0")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must sit in [0,1)")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")


def _parse_value(key, raw, kind):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is str:
            return raw
        if kind == "int_tuple":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind == "optional_float":
            return None if raw.lower() in ("none", "null", "") else float(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {kind}") from None
    raise AssertionError(f"unhandled field kind {kind}")


def parse_config_text(text) -> dict:
    """key=value lines to a raw-string dict; duplicate keys keep the last."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"config line {lineno}: expected key = value, got {line!r}")
        key, value = body.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=(), env=None) -> TrainConfig:
    """Assemble a TrainConfig from an optional file plus key=value overrides.

    `overrides` are raw `key=value` strings (CLI --set). STAINR_SEED in the
    environment wins over everything.
    """
    env = os.environ if env is None else env
    raw = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw.update(parse_config_text(f.read()))
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()

    train_kw, model_kw = {}, {}
    for key, value in raw.items():
        if key in _TRAIN_FIELD_TYPES:
            train_kw[key] = _parse_value(key, value, _TRAIN_FIELD_TYPES[key])
        elif key in _MODEL_FIELD_TYPES:
            model_kw[key] = _parse_value(key, value, _MODEL_FIELD_TYPES[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")

    seed_env = env.get("STAINR_SEED")
    if seed_env is not None:
        train_kw["seed"] = _parse_value("STAINR_SEED", seed_env, int)

    model = ModelConfig(**model_kw)
    return TrainConfig(model=model, **train_kw)


def worker_count(env=None) -> int:
    """Worker cap from STAINR_THREADS; defaults to 1 (fully serial)."""
    env = os.environ if env is None else env
    raw = env.get("STAINR_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"STAINR_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"STAINR_THREADS must be >= 1, got {n}")
    return n
