"""Run configuration: dataclass sections read from an INI-style text file.

Every field has a default, so an empty file is a valid config. Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .replay import MixSpec, Strategy


@dataclass
class GeometryConfig:
    volume: tuple[int, int, int] = (64, 64, 24)
    box: tuple[int, int, int] = (15, 15, 7)
    history: int = 4
    channels: tuple[int, ...] = (8, 16, 16, 32)
    head_widths: tuple[int, ...] = (128, 64, 6)
    anatomy_seed: int = 0


# paper-scale state representation, kept for full-size runs
FULL_SCALE_GEOMETRY = GeometryConfig(volume=(240, 240, 155), box=(45, 45, 11), history=4)


@dataclass
class TrainingConfig:
    batch_size: int = 48
    epochs_sert: int = 4
    epochs_mert: int = 20
    epochs_seril: int = 4
    steps_per_epoch: int = 2000
    updates_per_episode: int = 4
    gamma: float = 0.9
    lr: float = 1e-3
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_decay_steps: int = 4000
    max_episode_steps: int = 200
    target_sync_interval: int = 500


@dataclass
class ReplayConfig:
    strategy: str = "reservoir"
    budget: int = 2000
    capacity: int = 20000
    current_fraction: float = 0.5


@dataclass
class ExperimentConfig:
    regime: str = "seril"
    order: tuple[str, ...] = ()
    seed: int = 0


@dataclass
class EvalConfig:
    episodes: int = 50
    epsilon: float = 0.05
    threshold_full_scale: float = 15.0
    reference_dim: int = 240
    seed: int = 1_000_000


@dataclass
class Config:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        g, t, r = self.geometry, self.training, self.replay
        if len(g.volume) != 3 or len(g.box) != 3:
            raise ConfigError("volume and box need three extents")
        if any(b % 2 == 0 or b < 1 for b in g.box):
            raise ConfigError(f"box extents must be odd and positive, got {g.box}")
        if any(v < 2 * b for v, b in zip(g.volume, g.box)):
            raise ConfigError(f"volume {g.volume} must be at least twice the box {g.box}")
        if g.history < 1:
            raise ConfigError("history must be >= 1")
        if not 0.0 <= t.epsilon_end <= t.epsilon_start <= 1.0:
            raise ConfigError("need 0 <= epsilon_end <= epsilon_start <= 1")
        for name in ("batch_size", "epochs_sert", "epochs_mert", "epochs_seril", "steps_per_epoch",
                     "updates_per_episode", "epsilon_decay_steps", "max_episode_steps",
                     "target_sync_interval"):
            if getattr(t, name) < 1:
                raise ConfigError(f"training.{name} must be >= 1")
        try:
            Strategy(r.strategy)
        except ValueError:
            raise ConfigError(f"unknown replay strategy {r.strategy!r}") from None
        MixSpec(t.batch_size, r.current_fraction)
        if r.budget < 1 or r.capacity < 1:
            raise ConfigError("replay budget and capacity must be >= 1")
        if self.experiment.regime not in ("sert", "mert", "seril"):
            raise ConfigError(f"unknown regime {self.experiment.regime!r}")

    @property
    def mix(self) -> MixSpec:
        return MixSpec(self.training.batch_size, self.replay.current_fraction)

    @property
    def threshold(self) -> float:
        """Adequacy threshold scaled from the 240-voxel reference grid to this geometry."""
        e = self.eval
        return e.threshold_full_scale * min(self.geometry.volume) / e.reference_dim

    def replace(self, **sections) -> "Config":
        """Copy with per-section field overrides, e.g. ``replace(training={"lr": 1e-4})``."""
        kw = {}
        for f in fields(self):
            cur = getattr(self, f.name)
            kw[f.name] = dataclasses.replace(cur, **sections.get(f.name, {}))
        return Config(**kw)


_NAME_LISTS = {"experiment.order"}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, template, where: str):
    try:
        if isinstance(template, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if where in _NAME_LISTS:
                return tuple(parts)
            return tuple(int(p) for p in parts)
        if isinstance(template, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return type(template)(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {where}") from None


def loads(text: str) -> Config:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unreadable config: {e}") from None
    base = Config()
    sections = {}
    known = {f.name for f in fields(base)}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"unknown config section [{name}]")
        section = getattr(base, name)
        names = {f.name for f in fields(section)}
        values = {}
        for key, raw in parser.items(name):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            values[key] = _parse(raw, getattr(section, key), f"{name}.{key}")
        sections[name] = values
    return base.replace(**sections)


def load(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(cfg: Config) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for f in fields(cfg):
        section = getattr(cfg, f.name)
        parser[f.name] = {sf.name: _format(getattr(section, sf.name)) for sf in fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def as_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)
