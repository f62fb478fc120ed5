"""Experiment configuration: TOML/JSON in, validated nested dataclasses out."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .client import TrainConfig
from .data import FederationSpec
from .model import ModelConfig
from .server import DaGConfig

VARIANTS = ("full", "no_grl", "no_proto", "no_dag", "fedavg")
PROTOCOLS = ("in_domain", "zero_shot", "probabilistic")


class ConfigError(ValueError):
    pass


@dataclass
class CsvSource:
    path: str
    column: str
    client_id: int
    subdomain_label: int = 0
    role: str = "train"  # "train" or "unseen"


@dataclass
class DataConfig:
    source: str = "synthetic"
    synthetic: FederationSpec = field(default_factory=FederationSpec)
    csv: list = field(default_factory=list)  # list[CsvSource]
    stride: int = 16
    heldout_fraction: float = 0.2

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ValueError("source must be 'synthetic' or 'csv'")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0 < self.heldout_fraction < 1:
            raise ValueError("heldout_fraction must be in (0, 1)")


@dataclass
class DiffusionConfig:
    steps: int = 1250
    kind: str = "cosine"
    per_patch_timesteps: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kind not in ("cosine", "linear"):
            raise ValueError("kind must be 'cosine' or 'linear'")


@dataclass
class EvalConfig:
    horizons: list = field(default_factory=lambda: [8, 16, 32])
    protocols: list = field(default_factory=lambda: ["in_domain", "zero_shot", "probabilistic"])
    n_samples: int = 20
    seed: int = 1234
    mase_season: int = 24
    eval_every: int = 0
    feed_back: str = "mean"
    finetune_epochs: int = 0  # in-domain only: adapt every local group first

    def __post_init__(self):
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")
        if not self.horizons or min(self.horizons) < 1:
            raise ValueError("horizons must be positive integers")
        bad = set(self.protocols) - set(PROTOCOLS)
        if bad:
            raise ValueError(f"unknown protocols {sorted(bad)}")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.feed_back not in ("mean", "sample"):
            raise ValueError("feed_back must be 'mean' or 'sample'")


@dataclass
class ExperimentConfig:
    seed: int = 0
    rounds: int = 60
    workers: int = 0  # 0 -> one thread per client
    checkpoint_every: int = 10
    variant: str = "full"
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dag: DaGConfig = field(default_factory=DaGConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.workers < 0:
            raise ValueError("workers must be >= 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        t = self.train
        if t.local_epochs < 0 or t.batch_size < 1 or t.lr <= 0:
            raise ValueError("train: need local_epochs >= 0, batch_size >= 1, lr > 0")


_NESTED = {
    ExperimentConfig: {
        "data": DataConfig,
        "model": ModelConfig,
        "diffusion": DiffusionConfig,
        "train": TrainConfig,
        "dag": DaGConfig,
        "eval": EvalConfig,
    },
    DataConfig: {"synthetic": FederationSpec},
}


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or '<root>'}: expected a table, got {type(raw).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"{where}: unknown field")
        sub = _NESTED.get(cls, {}).get(key)
        if sub is not None:
            value = _build(sub, value, where)
        elif cls is DataConfig and key == "csv":
            value = [_build(CsvSource, v, f"{where}[{i}]") for i, v in enumerate(value)]
        elif isinstance(value, list) and key == "subdomain_frequencies":
            value = tuple(value)
        kwargs[key] = _check_type(names[key], value, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def _check_type(f, value, where):
    default = (
        f.default
        if f.default is not dataclasses.MISSING
        else (f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
    )
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    elif isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "")


def config_to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v

    return conv(cfg)


def _parse_scalar(text: str) -> Any:
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings (TOML literal syntax for values)."""
    raw = json.loads(json.dumps(raw))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not a table")
        node[parts[-1]] = _parse_scalar(text.strip())
    return raw


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
            # run directories carry {"config_hash", "config", "effective"}
            if isinstance(raw, dict) and "config_hash" in raw and "config" in raw:
                raw = raw["config"]
            return raw
        return tomli.loads(text)
    except (json.JSONDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None


def load_config(path, overrides=()) -> ExperimentConfig:
    return config_from_dict(apply_overrides(read_config_file(path), overrides))


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that defines the experiment except the ablation
    variant, output location and worker count, so variants of one
    experiment share a hash."""
    d = config_to_dict(cfg)
    for k in ("variant", "out_dir", "workers"):
        d.pop(k, None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def apply_variant(cfg: ExperimentConfig, variant: str | None = None) -> ExperimentConfig:
    """Return a copy with the ablation switches of ``variant`` applied."""
    variant = variant or cfg.variant
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    cfg = config_from_dict(config_to_dict(cfg))
    cfg.variant = variant
    if variant in ("no_grl", "fedavg"):
        cfg.train.grl_lambda = 0.0
        cfg.train.lambda_dom = 0.0
    if variant in ("no_proto", "fedavg"):
        cfg.train.lambda_align = 0.0
    if variant in ("no_dag", "fedavg"):
        cfg.dag.aggregation = "fedavg"
    return cfg
