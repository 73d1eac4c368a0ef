"""Experiment configuration: one YAML document per experiment.

Every section is optional; omitted values fall back to the published
settings (model and training) or the synthetic desk benchmark (task, data).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .protocol import GmdaTask, build_task
from .training import TrainConfig

DEFAULT_ALPHA_GRID = [1.0, 1.5, 2.0, 2.5, 3.0]
DEFAULT_GAMMA_GRID = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]


def _default_styles() -> list[dict]:
    from .experiments import SYNTHETIC_STYLES

    # lists rather than tuples so the defaults survive a YAML round trip unchanged
    return [{k: list(v) if isinstance(v, tuple) else v for k, v in asdict(s).items()} for s in SYNTHETIC_STYLES]


def _check_keys(cls, d: dict, section: str) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


@dataclass
class TaskSpec:
    source_label_sets: list[list[int]] = field(default_factory=lambda: [[0, 1, 2], [1, 2, 3], [0, 2, 3]])
    unknown_classes: list[int] = field(default_factory=lambda: [4, 5])
    domain_names: list[str] | None = field(default_factory=lambda: ["src_a", "src_b", "src_c", "target"])
    target_extra_unknown: bool = True

    def build(self, seed: int = 0) -> GmdaTask:
        return build_task(self.source_label_sets, self.target_extra_unknown, seed,
                          self.domain_names, self.unknown_classes)


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | external
    root: str | None = None  # on-disk layout root; synthetic data is generated in memory when unset
    n_per_class: int = 500
    n_test_per_class: int = 200
    seed: int = 0
    image_size: int = 32
    styles: list[dict] = field(default_factory=_default_styles)

    def __post_init__(self):
        if self.kind not in ("synthetic", "external"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'external', got {self.kind!r}")
        if self.kind == "external" and not self.root:
            raise ConfigError("external data needs data.root")


@dataclass
class Flags:
    disable_exemplar: bool = False
    disable_disentangle: bool = False


@dataclass
class SweepConfig:
    alpha: list[float] | None = field(default_factory=lambda: list(DEFAULT_ALPHA_GRID))
    gamma: list[float] | None = field(default_factory=lambda: list(DEFAULT_GAMMA_GRID))


@dataclass
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flags: Flags = field(default_factory=Flags)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out: str = "runs/vdd"

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        _check_keys(cls, d, "root")
        sections = {"task": TaskSpec, "data": DataConfig, "model": ModelConfig,
                    "train": TrainConfig, "flags": Flags, "sweep": SweepConfig}
        kwargs: dict[str, Any] = {}
        for name, sub in sections.items():
            part = d.get(name) or {}
            if not isinstance(part, dict):
                raise ConfigError(f"[{name}] must be a mapping")
            _check_keys(sub, part, name)
            try:
                kwargs[name] = sub(**part)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        if "out" in d:
            kwargs["out"] = str(d["out"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "task": asdict(self.task),
            "data": asdict(self.data),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "flags": asdict(self.flags),
            "sweep": asdict(self.sweep),
            "out": self.out,
        }

    def resolved_train(self) -> TrainConfig:
        """Train settings with the ablation flags folded in."""
        cfg = self.train
        if self.flags.disable_exemplar:
            cfg = replace(cfg, use_exemplar=False)
        if self.flags.disable_disentangle:
            cfg = replace(cfg, disentangle=False)
        return cfg

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.dump())
