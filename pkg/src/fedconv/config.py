"""Experiment configuration: a flat YAML document with an explicit schema version.

Defaults follow the paper's hyperparameter settings (100 rounds, 5 local
epochs at lr 0.001, 20 conv/TC epochs, cosine T_max=4 between 1e-5 and
1e-3, MLR slopes 0.85/0.001, 10 aggregation epochs at lr 0.001 with
lambda 0.2, 5 pre-training epochs).  ``preset: desk`` swaps in the
laptop-scale values listed in :data:`DESK_PRESET`.

Every random stream is derived from ``seed`` through a named sub-seed
(``split``, ``partition``, ``init``, ``training``); setting e.g.
``seed_partition`` explicitly changes only that stream.
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigurationError

SCHEMA_VERSION = 1
SEED_STREAMS = ("split", "partition", "init", "training")

DESK_PRESET = {
    "rounds": 30,
    "n_clients": 20,
    "downsample": 2,
    "conv_channels": (8, 16),
    "kernel": (3, 3),
    "pretrain_epochs": 20,
    "conv_epochs": 5,
    "tc_epochs": 5,
}


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    preset: str = "paper"

    # data
    dataset: str = "mnist-subset"  # mnist-subset | idx | synthetic
    idx_images: str | None = None
    idx_labels: str | None = None
    synthetic_classes: int = 10
    synthetic_per_class: int = 100
    synthetic_shape: tuple[int, ...] = (1, 12, 12)
    synthetic_separation: float = 4.0
    standardize: bool = True
    downsample: int = 1
    max_samples: int | None = None

    # model
    conv_channels: tuple[int, ...] = (16, 32)
    kernel: tuple[int, int] = (5, 5)
    pool: int = 2

    # federation
    n_clients: int = 20
    sr_grid: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    alpha: float = 0.1
    rounds: int = 100
    participation: float = 1.0
    pretrain: bool = True
    pretrain_epochs: int = 5

    # training
    optimizer: str = "adam"
    batch_size: int = 32
    local_epochs: int = 5
    local_lr: float = 0.001
    conv_epochs: int = 20
    tc_epochs: int = 20
    t_max: int = 4
    lr_min: float = 1e-5
    lr_max: float = 1e-3

    # pipeline
    stride: int = 1
    padding: int = 0
    s_p: float = 0.85
    s_n: float = 0.001
    use_pre: bool = True
    use_mlr: bool = True
    use_weight_norm: bool = True
    use_scheduler: bool = True
    kernel_init: str = "delta"
    identity_pipelines: bool = False

    # aggregation
    aggregation: str = "weighted"  # weighted | naive
    agg_epochs: int = 10
    agg_lr: float = 0.001
    agg_optimizer: str = "sgd"  # adam's per-coordinate scaling would flatten the KLD penalty
    lam: float = 0.2
    kld_bins: int = 64

    # reproducibility
    seed: int = 0
    seed_split: int | None = None
    seed_partition: int | None = None
    seed_init: int | None = None
    seed_training: int | None = None

    def __post_init__(self):
        for name in ("conv_channels", "kernel", "sr_grid", "synthetic_shape"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {self.schema_version}")
        if self.preset not in ("paper", "desk"):
            raise ConfigurationError(f"unknown preset {self.preset!r}")
        if self.dataset not in ("mnist-subset", "idx", "synthetic"):
            raise ConfigurationError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigurationError("dataset 'idx' needs idx_images and idx_labels")
        if not self.sr_grid or any(not 0 < sr <= 1 for sr in self.sr_grid):
            raise ConfigurationError("every SR must lie in (0, 1]")
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        if self.n_clients < 1:
            raise ConfigurationError("n_clients must be >= 1")
        if not 0 < self.participation <= 1:
            raise ConfigurationError("participation must lie in (0, 1]")
        if self.aggregation not in ("weighted", "naive"):
            raise ConfigurationError(f"unknown aggregation {self.aggregation!r}")
        for name in ("optimizer", "agg_optimizer"):
            if getattr(self, name) not in ("sgd", "adam"):
                raise ConfigurationError(f"unknown {name} {getattr(self, name)!r}")
        if self.lr_max < self.lr_min:
            raise ConfigurationError("lr_max must be >= lr_min")
        if self.lam < 0:
            raise ConfigurationError("lam must be non-negative")
        if self.downsample < 1:
            raise ConfigurationError("downsample must be >= 1")
        for name in ("rounds", "pretrain_epochs", "local_epochs", "conv_epochs", "tc_epochs", "agg_epochs"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")

    def sub_seed(self, stream: str) -> int:
        """Seed of one named random stream."""
        if stream not in SEED_STREAMS:
            raise ConfigurationError(f"unknown seed stream {stream!r}")
        explicit = getattr(self, f"seed_{stream}")
        if explicit is not None:
            return int(explicit)
        seq = np.random.SeedSequence([self.seed, zlib.crc32(stream.encode())])
        return int(seq.generate_state(1)[0])

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}


def from_dict(raw: dict) -> ExperimentConfig:
    """Build a config; unknown keys are rejected.  ``preset: desk`` fills desk defaults first."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    values = dict(DESK_PRESET) if raw.get("preset") == "desk" else {}
    values.update(raw)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return from_dict(raw or {})


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
