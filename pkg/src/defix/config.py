"""Run configuration: one versioned YAML file covering every tunable of the framework."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

CONFIG_VERSION = 1

WEATHER_STATES = ("clear", "cloudy", "wet", "soft_rainy", "hard_rainy")
DAYTIMES = ("noon", "sunset")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` maps dotted field paths to messages."""

    def __init__(self, errors: dict[str, str]):
        self.errors = errors
        super().__init__("; ".join(f"{k}: {v}" for k, v in errors.items()))


@dataclass
class SimConfig:
    dt: float = 0.05
    wheelbase: float = 2.5
    max_decel: float = 8.0
    max_accel: float = 3.0
    drag: float = 0.1
    max_steer: float = 0.7
    v_max: float = 15.0
    hazard_range: float = 15.0
    hazard_half_angle_deg: float = 30.0
    light_influence_radius: float = 20.0
    lane_width: float = 3.5
    corridor_half_width: float = 5.25
    progress_radius: float = 5.0
    progress_window: int = 5
    off_route_distance: float = 20.0
    weather_interval: int = 20
    weather_noise: dict = field(default_factory=lambda: {
        "clear": 0.0, "cloudy": 0.01, "wet": 0.02, "soft_rainy": 0.05, "hard_rainy": 0.1})
    light_cycle: tuple = (10.0, 2.0, 8.0)


@dataclass
class ControlConfig:
    lon_gains: tuple = (1.0, 0.1, 0.05)
    lat_gains: tuple = (0.8, 0.0, 0.2)
    windup: float = 10.0
    v_ref: float = 5.0
    spacing: float = 4.0
    window_segments: int = 5
    lookahead: float = 5.0


@dataclass
class PerceptionConfig:
    n_features: int = 128
    grid: int = 32
    view_radius: float = 25.0
    rear_view: float = 5.0       # front-camera stand-in: cells further behind the ego are masked
    frozen_seed: int = 1234
    n_targets: int = 4
    history: int = 120


@dataclass
class NetConfig:
    target_embed: int = 16
    speed_hidden: int = 32
    hidden: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    batch: int = 64
    epochs: int = 12
    holdout: float = 0.1


@dataclass
class ILConfig:
    n_target: int = 22000
    dagger_iterations: int = 2
    store_every: int = 10
    class_reweight: bool = False
    brake_threshold: float = 0.5
    train_routes: int = 24
    dagger_routes: int = 24
    eval_routes: int = 12
    warm_start: bool = True
    dagger_epochs: int = 8
    dagger_lr_scale: float = 0.1   # warm-start fine-tuning step size relative to net.lr


@dataclass
class DQNConfig:
    gamma: float = 0.99
    buffer: int = 50000
    batch: int = 64
    target_sync: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_steps: int = 30000
    lr: float = 5e-4
    hidden: int = 64
    episodes: int = 1000
    decision_interval: int = 5
    reward_scale: float = 0.01
    max_steps: int = 250
    spawn_offset: tuple = (3.0, 10.0)
    warmup: int = 1000
    lane_shift: float = 3.5
    blend: float = 12.0
    restrict_lane_change_to_motion: bool = False
    double: bool = True
    val_every: int = 100
    val_episodes: int = 50


@dataclass
class ClassifierConfig:
    dwell: int = 20
    vote_window: int = 20
    handover_every: int = 5        # storage cadence while a specialist drives in classifier data collection
    settle_seconds: float = 5.0    # counterfactual stop in a frozen world that counts as blocked
    return_hold: float = 8.0       # metres the IL keeps a specialist's lane offset before blending back
    composite_rounds: int = 2      # retrain rounds on rollouts of the composite agent itself
    selection: str = "frequency"
    epochs: int = 12


@dataclass
class EvalConfig:
    penalties: dict = field(default_factory=lambda: {
        "collision_pedestrian": 0.50, "collision_vehicle": 0.60,
        "collision_static": 0.65, "red_light": 0.70})
    stall_seconds: float = 60.0
    short_routes: int = 32
    long_routes: int = 9
    short_length: tuple = (150.0, 220.0)
    long_length: tuple = (350.0, 480.0)
    mixed: dict = field(default_factory=lambda: {
        "stuck_vehicle": 6, "crossing_pedestrian": 2, "red_light_runner": 2,
        "uncontrolled_turn": 2, "none": 2})
    dedupe_bin: float = 5.0


@dataclass
class Config:
    version: int = CONFIG_VERSION
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    net: NetConfig = field(default_factory=NetConfig)
    il: ILConfig = field(default_factory=ILConfig)
    dqn: DQNConfig = field(default_factory=DQNConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def stall_steps(self) -> int:
        return int(round(self.eval.stall_seconds / self.sim.dt))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _merge(obj: Any, data: dict, prefix: str, errors: dict[str, str]) -> None:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in fields:
            errors[path] = "unknown field"
            continue
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                errors[path] = "expected a mapping"
            else:
                _merge(current, value, path + ".", errors)
            continue
        if isinstance(current, bool):
            if not isinstance(value, bool):
                errors[path] = f"expected bool, got {type(value).__name__}"
                continue
        elif isinstance(current, int):
            if isinstance(value, bool) or not isinstance(value, int):
                errors[path] = f"expected int, got {type(value).__name__}"
                continue
        elif isinstance(current, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors[path] = f"expected number, got {type(value).__name__}"
                continue
            value = float(value)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(current):
                errors[path] = f"expected a list of length {len(current)}"
                continue
            value = tuple(float(v) for v in value)
        elif isinstance(current, dict):
            if not isinstance(value, dict):
                errors[path] = "expected a mapping"
                continue
            value = {**current, **value}
        elif isinstance(current, str) and not isinstance(value, str):
            errors[path] = "expected a string"
            continue
        setattr(obj, key, value)


def validate(cfg: Config) -> None:
    errors: dict[str, str] = {}
    if cfg.version != CONFIG_VERSION:
        errors["version"] = f"unsupported version {cfg.version}"
    positive = {
        "sim.dt": cfg.sim.dt, "sim.wheelbase": cfg.sim.wheelbase, "sim.max_decel": cfg.sim.max_decel,
        "sim.hazard_range": cfg.sim.hazard_range, "control.v_ref": cfg.control.v_ref,
        "control.spacing": cfg.control.spacing, "net.lr": cfg.net.lr, "dqn.lr": cfg.dqn.lr,
        "perception.view_radius": cfg.perception.view_radius,
        "perception.rear_view": cfg.perception.rear_view, "il.dagger_lr_scale": cfg.il.dagger_lr_scale,
        "eval.stall_seconds": cfg.eval.stall_seconds, "classifier.settle_seconds": cfg.classifier.settle_seconds,
    }
    for name, value in positive.items():
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
            errors[name] = "must be a positive finite number"
    if cfg.sim.weather_interval < 1:
        errors["sim.weather_interval"] = "must be >= 1"
    if cfg.il.n_target <= 0:
        errors["il.n_target"] = "must be > 0"
    if cfg.il.dagger_iterations < 0:
        errors["il.dagger_iterations"] = "must be >= 0"
    lo, hi = cfg.dqn.spawn_offset
    if not (3.0 <= lo <= hi <= 10.0):
        errors["dqn.spawn_offset"] = "must lie within [3, 10] m"
    if cfg.net.optimizer not in ("sgd", "adam"):
        errors["net.optimizer"] = "must be 'sgd' or 'adam'"
    if cfg.classifier.selection not in ("frequency", "random"):
        errors["classifier.selection"] = "must be 'frequency' or 'random'"
    if cfg.classifier.dwell < 1:
        errors["classifier.dwell"] = "must be >= 1"
    if cfg.classifier.handover_every < 1:
        errors["classifier.handover_every"] = "must be >= 1"
    if cfg.classifier.return_hold < 0:
        errors["classifier.return_hold"] = "must be >= 0"
    if cfg.classifier.composite_rounds < 0:
        errors["classifier.composite_rounds"] = "must be >= 0"
    for kind, p in cfg.eval.penalties.items():
        if not (0.0 < float(p) < 1.0):
            errors[f"eval.penalties.{kind}"] = "must be in (0, 1)"
    if set(cfg.sim.weather_noise) != set(WEATHER_STATES):
        errors["sim.weather_noise"] = f"must define exactly {list(WEATHER_STATES)}"
    if errors:
        raise ConfigError(errors)


def from_dict(data: dict | None) -> Config:
    cfg = Config()
    errors: dict[str, str] = {}
    if data:
        if not isinstance(data, dict):
            raise ConfigError({"<root>": "expected a mapping"})
        _merge(cfg, data, "", errors)
    if errors:
        raise ConfigError(errors)
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return from_dict(None)
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError({"<file>": f"cannot read {path}: {exc.strerror}"}) from exc
    except yaml.YAMLError as exc:
        raise ConfigError({"<file>": str(exc)}) from exc
    return from_dict(data)


def dump_config(cfg: Config, path: str | Path) -> None:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    with open(path, "w") as fh:
        yaml.safe_dump(plain(cfg.to_dict()), fh, sort_keys=False)
