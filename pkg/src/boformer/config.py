"""INI run configuration.

Sections ``[task]``, ``[model]``, ``[trainer]`` and ``[eval]`` map onto the
matching dataclasses; unknown keys are rejected so typos surface early.
The model's objective count always follows ``task.K``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .bench import ConfigError, TaskConfig
from .model import ModelConfig
from .trainer import TrainerConfig


@dataclass
class EvalConfig:
    policies: tuple[str, ...] = ("ehvi", "sucb", "random")
    suites: tuple[str, ...] = ("rbf-gp",)
    episodes: int = 20
    horizon: int = 50
    seed: int = 0
    out_dir: str = "results"
    plots: bool = True


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def model_for_task(self) -> ModelConfig:
        return replace(self.model, K=self.task.K)


def _convert(raw: str, default):
    if isinstance(default, bool):
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def _apply(obj, items: dict[str, str], section: str):
    known = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in known or (section == "model" and key == "K"):
            raise ConfigError(f"unknown key {section}.{key}")
        try:
            updates[key] = _convert(raw, known[key])
        except ValueError as err:
            raise ConfigError(f"{section}.{key}: {err}") from err
    return replace(obj, **updates)


def load_config(path: str | Path | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive (task.K)
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        if section not in ("task", "model", "trainer", "eval"):
            raise ConfigError(f"unknown section [{section}]")
        setattr(cfg, section, _apply(getattr(cfg, section), dict(parser[section]), section))
    return cfg


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Apply command-line values that were actually given (``None`` = absent)."""
    given = {k: v for k, v in values.items() if v is not None}
    if given:
        setattr(cfg, section, replace(getattr(cfg, section), **given))
    return cfg
