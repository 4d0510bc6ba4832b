"""Experiment configuration: one INI file with sections, round-trippable."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from typing import get_type_hints

TASKS = ("classification", "metric-learning")
VARIANTS = ("mbj", "baseline", "rr", "fr", "fr+rj", "mbj-w", "mbj-f", "mbj-wf")
SOURCES = (
    "synthetic",
    "synthetic-one-tail",
    "synthetic-retrieval",
    "cifar10",
    "cifar100",
    "cifar10-one-tail",
    "market1501",
)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class ExperimentSection:
    task: str = "classification"
    variant: str = "mbj"
    seed: int = 0
    output_dir: str = "runs/default"


@dataclass
class DataSection:
    source: str = "synthetic-one-tail"
    class_count: int = 10
    max_count: int = 1000
    imbalance_ratio: float = 100.0
    tail_count: int = 10
    dim: int = 16
    within_class_scale: float = 0.2
    test_per_class: int = 500
    head_classes: int = 20
    tail_classes: int = 100
    head_count: int = 60
    tail_images_per_class: int = 5
    data_root: str | None = None


@dataclass
class ModelSection:
    backbone: str = "mlp"
    embed_dim: int = 32
    hidden_dim: int = 64


@dataclass
class ScheduleSection:
    phase1_epochs: int = 30
    phase2_epochs: int = 10
    phase1_lr: float = 0.1
    phase2_lr: float | None = None
    lr_decay_epochs: tuple[int, ...] = (20,)
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = False


@dataclass
class LossSection:
    eta: float | None = None  # None: 15 for classification, 1/15 for metric learning
    alpha: float = 30.0
    delta: float = 0.35


@dataclass
class MemorySection:
    beta: float = 1.5
    capacity: int | None = None  # None: 5 x classes
    memory_batch: int | None = None
    rj_sigma_ratio: float = 0.1


@dataclass
class AnalysisSection:
    observe_epochs: int = 10
    export_embeddings: bool = True


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    loss: LossSection = field(default_factory=LossSection)
    memory: MemorySection = field(default_factory=MemorySection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def validate(self) -> "ExperimentConfig":
        e = self.experiment
        if e.task not in TASKS:
            raise ConfigError(f"experiment.task: {e.task!r} not in {TASKS}")
        if e.variant not in VARIANTS:
            raise ConfigError(f"experiment.variant: {e.variant!r} not in {VARIANTS}")
        if self.data.source not in SOURCES:
            raise ConfigError(f"data.source: {self.data.source!r} not in {SOURCES}")
        retrieval = self.data.source in ("synthetic-retrieval", "market1501")
        if retrieval != (e.task == "metric-learning"):
            raise ConfigError(f"data.source: {self.data.source!r} does not fit task {e.task!r}")
        if self.memory.beta < 0:
            raise ConfigError("memory.beta: must be >= 0")
        if self.loss.alpha <= 0:
            raise ConfigError("loss.alpha: must be > 0")
        if self.schedule.phase2_lr is not None and self.schedule.phase2_lr >= self.schedule.phase1_lr:
            raise ConfigError("schedule.phase2_lr: must be smaller than phase1_lr")
        return self

    @property
    def eta(self) -> float:
        if self.loss.eta is not None:
            return self.loss.eta
        return 15.0 if self.experiment.task == "classification" else 1 / 15

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for sec in fields(self):
            obj = getattr(self, sec.name)
            cp[sec.name] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        cfg = cls()
        known = {f.name for f in fields(cls)}
        for name in cp.sections():
            if name not in known:
                raise ConfigError(f"unknown section [{name}]")
            obj = getattr(cfg, name)
            hints = get_type_hints(type(obj))
            valid = {f.name for f in fields(obj)}
            for key, raw in cp[name].items():
                if key not in valid:
                    raise ConfigError(f"unknown key {name}.{key}")
                try:
                    setattr(obj, key, _parse(raw, hints[key]))
                except ValueError as exc:
                    raise ConfigError(f"{name}.{key}: {exc}") from None
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())

    def override(self, dotted: str, value: str) -> None:
        """Apply ``section.key=value`` style overrides from the command line."""
        try:
            section, key = dotted.split(".", 1)
            obj = getattr(self, section)
            hint = get_type_hints(type(obj))[key]
        except (ValueError, AttributeError, KeyError):
            raise ConfigError(f"unknown key {dotted}") from None
        try:
            setattr(obj, key, _parse(value, hint))
        except ValueError as exc:
            raise ConfigError(f"{dotted}: {exc}") from None


def _format(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, hint):
    raw = raw.strip()
    optional = "None" in str(hint)
    if optional and raw.lower() in ("auto", "none", ""):
        return None
    base = str(hint)
    if "tuple" in base:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if "bool" in base:
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "int" in base:
        return int(raw)
    if "float" in base:
        return float(raw)
    return raw
