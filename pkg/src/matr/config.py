"""Flat ``key = value`` run configuration with dotted section prefixes.

Example::

    # toy run
    seed = 3
    mode = matr
    model.dim = 64
    train.steps = 2000
    tracker.miss_tolerance = 25

``seed`` and ``mode`` are top-level and fan out to every section that has
such a field. Precedence when resolving: command-line flag, then the
``MATR_SEED`` environment variable (seed only), then the file, then defaults.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from .geometry import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .rollout import MODES
from .synthdata import SynthConfig
from .tracker import TrackerConfig
from .trainer import TrainConfig

SEED_ENV = "MATR_SEED"


@dataclass
class DataConfig:
    train_clips: int = 100
    eval_clips: int = 10
    length: int = 24


@dataclass
class AblateConfig:
    modes: tuple[str, ...] = ("matr", "qim_like", "klf")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    collision_clips: int = 200


@dataclass
class PathsConfig:
    dataset: str = "data"
    checkpoint: str = ""
    out_dir: str = "out"


# section name -> attribute; "seed" and "mode" inside sections are driven from the top level
SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig, "loss": LossConfig,
            "tracker": TrackerConfig, "data": DataConfig, "ablate": AblateConfig,
            "paths": PathsConfig}
_SHARED = ("seed", "mode")


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "matr"
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        self.sync()

    def sync(self) -> "RunConfig":
        """Push the top-level seed and mode into every section that carries them."""
        for name in SECTIONS:
            section = getattr(self, name)
            names = {f.name for f in fields(section)}
            updates = {k: getattr(self, k) for k in _SHARED if k in names}
            if updates:
                setattr(self, name, replace(section, **updates))
        return self

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for mode in self.ablate.modes:
            if mode not in MODES:
                raise ConfigError(f"ablate.modes: unknown mode {mode!r}")
        for name in ("synth", "model", "train", "loss", "tracker"):
            getattr(self, name).validate()
        if min(self.data.train_clips, self.data.eval_clips, self.data.length) < 1:
            raise ConfigError("data.train_clips, data.eval_clips and data.length must be positive")
        return self

    # -- text form -------------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}", f"mode = {self.mode}"]
        for name in SECTIONS:
            section = getattr(self, name)
            lines.append("")
            for f in fields(section):
                if f.name in _SHARED:
                    continue
                lines.append(f"{name}.{f.name} = {_format(getattr(section, f.name))}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, values: Mapping[str, str]) -> "RunConfig":
        """Apply dotted ``key -> text`` overrides and return a new config."""
        top = {k: getattr(self, k) for k in _SHARED}
        sections = {name: asdict(getattr(self, name)) for name in SECTIONS}
        for key, text in values.items():
            if key in _SHARED:
                top[key] = _parse(text, top[key], key)
                continue
            name, _, attr = key.partition(".")
            if name not in sections or attr not in sections[name] or attr in _SHARED:
                raise ConfigError(f"unknown config key {key!r}")
            sections[name][attr] = _parse(text, sections[name][attr], key)
        built = {name: SECTIONS[name](**vals) for name, vals in sections.items()}
        return RunConfig(**top, **built)


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(t) for t in items)
            return tuple(items)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {number}: expected 'key = value', got {raw.strip()!r}")
        values[key.strip()] = value.strip()
    return values


def resolve(path: str | os.PathLike | None = None, flags: Mapping[str, str] | None = None,
            environ: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults, then the file, then ``MATR_SEED``, then explicit flags."""
    environ = os.environ if environ is None else environ
    values: dict[str, str] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    if environ.get(SEED_ENV, "").strip():
        values["seed"] = environ[SEED_ENV]
    values.update(flags or {})
    return RunConfig().with_overrides(values).validate()
