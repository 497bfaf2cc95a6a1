"""Experiment configuration: nested dataclasses read from flat ``section.key = value`` text."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .controller import RewardConfig, StepBounds
from .errors import ConfigError
from .meta import MetaConfig

DATA_ROOT_ENV = "ASMAML_DATA_ROOT"


@dataclass
class DataConfig:
    # "synthetic" or the name of a TU dataset directory under ``root``
    name: str = "synthetic"
    root: str = ""
    # explicit class ids; when all three are empty a seeded random split is used
    train_classes: list[int] = field(default_factory=list)
    val_classes: list[int] = field(default_factory=list)
    test_classes: list[int] = field(default_factory=list)
    split_file: str = ""
    split_counts: list[int] = field(default_factory=list)
    split_seed: int = 0
    # fraction of training graphs held out when there are no validation classes
    val_fraction: float = 0.2
    synthetic_per_family: int = 100
    synthetic_noise: float = 0.1
    synthetic_seed: int = 0


@dataclass
class TaskConfig:
    way: int = 5
    shot: int = 10
    query: int = 15


@dataclass
class ControllerConfig:
    enabled: bool = True
    hidden: int = 32
    # step count used when the controller is disabled
    fixed_steps: int = 9


@dataclass
class TrainConfig:
    episodes: int = 2000
    val_interval: int = 100
    val_tasks: int = 50
    patience: int = 50
    seed: int = 0


@dataclass
class EvalConfig:
    tasks: int = 200
    seed: int = 12345


@dataclass
class BaselineConfig:
    finetune_steps: int = 100
    # 0 means: same number of optimizer steps as training episodes
    pretrain_steps: int = 0
    # 0 means: graphs per episode (way * (shot + query))
    pretrain_batch: int = 0
    # 0 means: meta.outer_lr
    pretrain_lr: float = 0.0
    wl_iterations: int = 3
    sp_max_length: int = 10
    graphlet_samples: int = 1000


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    bounds: StepBounds = field(default_factory=StepBounds)
    reward: RewardConfig = field(default_factory=RewardConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def validate(self) -> ExperimentConfig:
        """Re-run every section's checks; raises ConfigError."""
        try:
            for f in dataclasses.fields(self):
                section = getattr(self, f.name)
                if hasattr(section, "__post_init__"):
                    section.__post_init__()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.eval.tasks < 1:
            raise ConfigError("eval.tasks must be >= 1")
        if min(self.task.way, self.task.shot) < 1 or self.task.query < 1:
            raise ConfigError("task.way, task.shot and task.query must be >= 1")
        if self.train.episodes < 0:
            raise ConfigError("train.episodes must be >= 0")
        return self

    def data_root(self) -> Path:
        root = self.data.root or os.environ.get(DATA_ROOT_ENV, "")
        return Path(root) if root else Path(".")

    def set(self, key: str, value: str) -> None:
        section_name, _, name = key.partition(".")
        if not name or not hasattr(self, section_name):
            raise ConfigError(f"unknown config key {key!r}")
        section = getattr(self, section_name)
        hints = typing.get_type_hints(type(section))
        if name not in hints or name not in {f.name for f in dataclasses.fields(section)}:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(section, name, _convert(value, hints[name]))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None

    def items(self) -> list[tuple[str, str]]:
        out = []
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            for sf in dataclasses.fields(section):
                out.append((f"{f.name}.{sf.name}", _format(getattr(section, sf.name))))
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())


def _convert(text: str, tp):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("", "none"):
            return None
        return _convert(text, inner[0])
    if origin is list:
        return [_convert(tok, args[0]) for tok in text.replace(",", " ").split()]
    if tp is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return " ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        cfg.set(key.strip(), value)
    return cfg


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a config file (optional) and apply ``key=value`` overrides in order."""
    cfg = ExperimentConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_config(text, cfg)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value, got {item!r}")
        cfg.set(key.strip(), value)
    return cfg.validate()
