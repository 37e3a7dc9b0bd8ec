"""Experiment configuration: JSON documents mapped onto nested dataclasses.

Unknown keys are rejected. Defaults are the desk-scale schedule (log every
50 steps, 100 draws per estimate, refit every 500 steps, 10 GC rounds).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

CONFIG_VERSION = 1
ESTIMATORS = ("full", "sgb", "sg2b", "svrg", "gc")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DuplicatesConfig:
    n_distinct: int = 5
    fraction: float = 0.0


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "rf"  # rf | blobs
    # rf
    input_dim: int = 20
    teacher_hidden: int = 20
    student_hidden: int = 200
    n_train: int = 200
    bias: float | None = None
    # blobs
    n_per_class: int = 20
    separation: float = 3.0
    overlap_count: int = 4
    # modifiers
    duplicates: DuplicatesConfig = field(default_factory=DuplicatesConfig)
    corrupt_fraction: float = 0.0


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = ()
    activation: str = "relu"
    bias: bool = False
    init_scale: float = 1.0


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 10
    steps: int = 2000


@dataclass(frozen=True)
class ScheduleConfig:
    log_every: int = 50
    draws: int = 100
    refit_every: int = 500
    gc_iters: int = 10
    n_clusters: int | None = None  # defaults to the batch size
    gc_init: str = "both"  # both | balanced | kmeans++
    svd_fallback: bool = False
    gc_warm_start: bool = False  # start each refit from the previous partition


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    estimators: tuple[str, ...] = ("sgb", "sg2b", "svrg", "gc")

    @property
    def n_clusters(self) -> int:
        return self.schedule.n_clusters or self.trainer.batch_size

    @property
    def n_examples(self) -> int:
        d = self.dataset
        if d.kind == "rf":
            return d.n_train
        return 2 * d.n_per_class + d.overlap_count

    def validate(self) -> ExperimentConfig:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.dataset.kind not in ("rf", "blobs"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad or not self.estimators:
            raise ConfigError(f"unknown estimators {bad}; choose from {ESTIMATORS}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigError("duplicate estimator in roster")
        t, s = self.trainer, self.schedule
        n = self.n_examples
        if t.lr <= 0 or t.steps < 1 or not 1 <= t.batch_size <= n:
            raise ConfigError("need lr > 0, steps >= 1 and 1 <= batch_size <= N")
        if "sg2b" in self.estimators and 2 * t.batch_size > n:
            raise ConfigError("sg2b needs 2 * batch_size <= N")
        if not 1 <= self.n_clusters <= n:
            raise ConfigError(f"need 1 <= n_clusters <= N ({n})")
        if s.log_every < 1 or s.refit_every < 1 or s.gc_iters < 1 or s.draws < 2:
            raise ConfigError("schedule intervals must be >= 1 and draws >= 2")
        if s.gc_init not in ("both", "balanced", "kmeans++"):
            raise ConfigError(f"unknown gc_init {s.gc_init!r}")
        if self.model.activation not in ("relu", "identity"):
            raise ConfigError(f"unknown activation {self.model.activation!r}")
        return self


def _build(cls, data, path="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}")
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{path}.{name}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    try:
        cfg = _build(ExperimentConfig, data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Replace dotted fields, e.g. ``override(cfg, **{"trainer.lr": 0.1})``."""
    d = to_dict(cfg)
    for key, value in changes.items():
        node = d
        *parents, leaf = key.split(".")
        for p in parents:
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown config field {key!r}")
        node[leaf] = value
    return from_dict(d)
