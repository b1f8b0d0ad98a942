"""Run configuration: nested dataclasses serialised as JSON with a strict schema."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .models import ModelConfig
from .planning.mppi import CostParams
from .terrainsim import CorpusSpec, SimParams, TerrainParams, WorldSpec
from .training.loop import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    hours: float = 1.0
    seed: int = 0
    episode_max_steps: int = 150
    flat_fraction: float = 0.2
    noise_scale: float = 0.35
    cruise_range: tuple = (0.4, 1.0)
    n_goals: int = 4
    val_fraction: float = 0.2
    stride: int = 1
    split_seed: int = 0
    terrain: TerrainParams = field(default_factory=TerrainParams)
    world: WorldSpec = field(default_factory=WorldSpec)

    def total_steps(self, dt: float) -> int:
        return int(round(self.hours * 3600.0 / dt))

    def corpus_spec(self, dt: float) -> CorpusSpec:
        return CorpusSpec(self.total_steps(dt), self.seed, self.episode_max_steps, self.flat_fraction,
                          self.noise_scale, self.cruise_range, self.n_goals, self.terrain, self.world)


@dataclass(frozen=True)
class EvalConfig:
    n_trials: int = 10
    max_steps: int = 90
    flat: bool = False
    h_max: float = 0.15
    first_world: int = 0
    planner_seed: int = 0
    mppi_iterations: int = 1


@dataclass(frozen=True)
class AblationConfig:
    studies: tuple = ("pe", "norm", "horizon", "patch_head", "models", "probe")
    seeds: tuple = (0, 1, 2)
    probe_epochs: int = 10
    probe_max_examples: int | None = None


@dataclass(frozen=True)
class RunConfig:
    kind: str = "vertiformer"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sim: SimParams = field(default_factory=SimParams)
    cost: CostParams = field(default_factory=CostParams)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return to_dict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def hash(self) -> str:
        return config_hash(self.to_dict())


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return dataclasses.MISSING


def from_dict(cls, d: dict, where: str = ""):
    """Build ``cls`` from ``d``; unknown keys anywhere raise :class:`ConfigError`."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}")
    kw = {}
    for k, v in d.items():
        dflt = _default(fields[k])
        if dataclasses.is_dataclass(dflt):
            v = from_dict(type(dflt), v, f"{where}{k}.")
        elif isinstance(dflt, tuple) and isinstance(v, list):
            v = tuple(v)
        elif isinstance(dflt, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where or 'config'}: {err}") from err


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _reject_constant(name):
    raise ConfigError(f"non-finite number {name} is not valid JSON")


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"), parse_constant=_reject_constant)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    return from_dict(RunConfig, d)


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(cfg.to_json(), encoding="utf-8", newline="\n")
