"""Run configuration: one strict JSON document with per-section defaults.

Unknown keys are rejected. Every run echoes its resolved config (plus
seeds and the package version) into run.json inside the output
directory, which is sufficient to reproduce the run bit for bit on one
platform. Flags mirror config paths (`--train.batch_size 32`), and the
env var ULCERFORGE_SEED overrides the root seed.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .schedule import NoiseSchedule, build_linear_schedule
from .training import TrainConfig
from .unet import UNetConfig

SEED_ENV_VAR = "ULCERFORGE_SEED"


@dataclass
class ScheduleSection:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ModelSection:
    in_channels: int = 1
    base_channels: int = 16
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2])
    attention_levels: list[int] = field(default_factory=lambda: [1])
    attention_heads: int = 1
    time_embed_dim: int = 32
    groups_for_norm: int = 8
    image_size: int = 8


@dataclass
class TrainSection:
    batch_size: int = 32
    initial_lr: float = 1e-4
    lr_decay_policy: str = "cosine"
    lr_floor_ratio: float = 0.1
    epochs: int = 500
    checkpoint_every: int = 1000
    manifest: str = ""


@dataclass
class SampleSection:
    count: int = 64
    curate: bool = False
    k_sigma: float = 3.0


@dataclass
class MetricsSection:
    embedding: str = "flatten"
    embedding_dim: int = 0  # 0 = derive from image shape (flatten only)
    embedding_seed: int = 0
    external_path: str = ""
    subset_size: int = 50
    subsets: int = 100


@dataclass
class StudySection:
    images_total: int = 100
    split_real: int = 50
    split_synthetic: int = 50
    raters_expected: int = 3
    shuffle_seed: int = 0
    admin_token: str = ""
    host: str = "127.0.0.1"
    port: int = 8765
    manifest: str = ""
    frontend_dir: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    study: StudySection = field(default_factory=StudySection)

    def __post_init__(self):
        if self.study.split_real + self.study.split_synthetic != self.study.images_total:
            raise ConfigError("study split counts must sum to images_total")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def build_schedule(self) -> NoiseSchedule:
        return build_linear_schedule(self.schedule.steps, self.schedule.beta_start,
                                     self.schedule.beta_end)

    def build_model_config(self) -> UNetConfig:
        m = self.model
        return UNetConfig(
            in_channels=m.in_channels,
            base_channels=m.base_channels,
            channel_multipliers=tuple(m.channel_multipliers),
            attention_levels=frozenset(m.attention_levels),
            attention_heads=m.attention_heads,
            time_embed_dim=m.time_embed_dim,
            groups_for_norm=m.groups_for_norm,
        )

    def build_train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            batch_size=t.batch_size, initial_lr=t.initial_lr,
            lr_decay_policy=t.lr_decay_policy, lr_floor_ratio=t.lr_floor_ratio,
            epochs=t.epochs, seed=self.seed, checkpoint_every=t.checkpoint_every,
        )


def _coerce_value(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {name!r} expects bool, got {type(value).__name__}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {name!r} expects float, got {type(value).__name__}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {name!r} expects int, got {type(value).__name__}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {name!r} expects str, got {type(value).__name__}")
        return value
    raise ConfigError(f"config key {name!r} has unsupported type")


def _section_from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {sorted((path + '.' if path else '') + k for k in unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        full = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _section_from_dict(type(default), value, full)
        elif isinstance(default, list):
            if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int)
                                                  for v in value):
                raise ConfigError(f"config key {full!r} expects a list of ints")
            kwargs[name] = list(value)
        else:
            kwargs[name] = _coerce_value(full, value, default)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _section_from_dict(RunConfig, data, "")


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path}: invalid JSON ({err.msg})") from err
    return config_from_dict(data)


def apply_override(data: dict, dotted_key: str, raw_value: str) -> None:
    """Apply one `--section.key value` style override onto a config dict."""
    parts = dotted_key.split(".")
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config path {dotted_key!r}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key {dotted_key!r}")
    try:
        node[leaf] = json.loads(raw_value)
    except json.JSONDecodeError:
        node[leaf] = raw_value


def resolve_seed(config: RunConfig, cli_seed: int | None = None) -> int:
    """Root seed priority: env var, then --seed flag, then the config file."""
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError as err:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from err
    if cli_seed is not None:
        return cli_seed
    return config.seed
