"""Run configuration.

A run is described by one YAML (or JSON) document. Sections map to the
dataclasses below; `--set section.key=value` overrides are applied to the raw
document before validation, with values parsed as YAML scalars.
"""

from __future__ import annotations

import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml

from .errors import ConfigError
from .neural import DESK_UNITS, UNIT_PRESETS

Json = Dict[str, Any]

OUTPUT_DIR_ENV = "FDIA_OUTPUT_DIR"


@dataclass
class GridConfig:
    case_path: Optional[str] = None
    case_name: str = "ieee30"
    power_sigma: float = 0.01
    voltage_sigma: float = 0.004
    alpha: float = 0.05


@dataclass
class LoadsConfig:
    csv_path: Optional[str] = None
    daily_amplitude: float = 0.12
    weekly_amplitude: float = 0.05
    seasonal_amplitude: float = 0.10
    noise_sigma: float = 0.015
    jitter: float = 0.02
    start_hour: int = 0


@dataclass
class DatasetConfig:
    window: int = 5
    sample_count: int = 1000
    stride: int = 1
    awgn_sigma: float = 0.002
    fractions: List[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    boundary_mode: str = "temporal"
    attack_fraction: float = 1.0
    audit_fraction: float = 1.0
    max_failure_rate: float = 0.1
    span_hours: int = 8760


@dataclass
class AttackConfig:
    mode: str = "random"
    magnitude: float = 0.05
    min_magnitude: float = 0.02
    targets: List[int] = field(default_factory=list)
    max_retries: int = 10


@dataclass
class TrainSection:
    units: List[int] = field(default_factory=lambda: list(DESK_UNITS))
    activation: str = "relu"
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 5e-3
    lr_decay: float = 0.92
    optimizer: str = "adam"
    clip_norm: float = 5.0
    patience: int = 8
    resume: bool = False


@dataclass
class ThresholdsConfig:
    theta: float = 0.01
    v: float = 0.01


@dataclass
class HistogramConfig:
    bins: int = 50
    low: float = 0.0
    high: float = 0.05


@dataclass
class DemoConfig:
    window_index: int = 0
    states: List[int] = field(default_factory=list)
    max_states: int = 5


@dataclass
class RunConfig:
    seed: int
    output_dir: str = "runs/default"
    grid: GridConfig = field(default_factory=GridConfig)
    loads: LoadsConfig = field(default_factory=LoadsConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train: TrainSection = field(default_factory=TrainSection)
    thresholds: ThresholdsConfig = field(default_factory=ThresholdsConfig)
    histogram: HistogramConfig = field(default_factory=HistogramConfig)
    demo: DemoConfig = field(default_factory=DemoConfig)

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> Json:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(value: Any, hint: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, inner[0], where)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return [_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a mapping")
        return _build(hint, value, where)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    raise ConfigError(f"{where} has unsupported type {hint!r}")


def _build(cls: Any, data: Json, where: str) -> Any:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(value, hints[name], f"{where}.{name}" if where else name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"incomplete config section {where or '<root>'}: {exc}") from exc


def apply_override(data: Json, assignment: str) -> None:
    """Apply `dotted.key=value` to a raw config mapping in place."""

    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {assignment!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {assignment!r} has an invalid value: {exc}") from exc
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {assignment!r} descends into a scalar")
        node = child
    node[parts[-1]] = value


def config_from_dict(data: Json) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    if "seed" not in data or data["seed"] is None:
        raise ConfigError("config must set an integer seed")
    train = data.get("train")
    if isinstance(train, dict) and isinstance(train.get("units"), str):
        preset = train["units"]
        if preset not in UNIT_PRESETS:
            raise ConfigError(f"train.units preset must be one of {sorted(UNIT_PRESETS)}, got {preset!r}")
        data = {**data, "train": {**train, "units": list(UNIT_PRESETS[preset])}}
    cfg = _build(RunConfig, data, "")
    validate(cfg)
    return cfg


def load_config(
    path: Optional[str | Path] = None,
    overrides: Sequence[str] = (),
    *,
    check_paths: bool = True,
) -> RunConfig:
    data: Json = {}
    if path is not None:
        path = Path(path)
        try:
            raw = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(raw) if raw.strip() else {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping")
        data = loaded
    for assignment in overrides:
        apply_override(data, assignment)

    env_dir = os.getenv(OUTPUT_DIR_ENV)
    if env_dir:
        data["output_dir"] = env_dir

    cfg = config_from_dict(data)
    if check_paths:
        check_referenced_paths(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    ds = cfg.dataset
    if ds.window < 2:
        raise ConfigError("dataset.window must be at least 2")
    if ds.sample_count < 3:
        raise ConfigError("dataset.sample_count must be at least 3")
    if ds.stride < 1:
        raise ConfigError("dataset.stride must be at least 1")
    if ds.awgn_sigma < 0:
        raise ConfigError("dataset.awgn_sigma must be non-negative")
    if len(ds.fractions) != 3 or any(f <= 0 for f in ds.fractions) or abs(sum(ds.fractions) - 1.0) > 1e-9:
        raise ConfigError("dataset.fractions must be three positive values summing to 1")
    if ds.boundary_mode not in ("temporal", "blocked"):
        raise ConfigError("dataset.boundary_mode must be temporal or blocked")
    if not 0.0 <= ds.max_failure_rate <= 1.0:
        raise ConfigError("dataset.max_failure_rate must lie in [0, 1]")
    if ds.span_hours < 0:
        raise ConfigError("dataset.span_hours must be non-negative")

    at = cfg.attack
    if at.mode not in ("random", "targeted"):
        raise ConfigError("attack.mode must be random or targeted")
    if not at.magnitude > 0:
        raise ConfigError("attack.magnitude must be positive")
    if not 0 <= at.min_magnitude <= at.magnitude:
        raise ConfigError("attack.min_magnitude must lie in [0, magnitude]")
    if at.mode == "targeted" and not at.targets:
        raise ConfigError("attack.targets must be set in targeted mode")

    if not 0.0 < cfg.grid.alpha < 1.0:
        raise ConfigError("grid.alpha must lie in (0, 1)")
    if cfg.grid.power_sigma <= 0 or cfg.grid.voltage_sigma <= 0:
        raise ConfigError("measurement sigmas must be positive")

    tr = cfg.train
    if len(tr.units) != 3 or any(u < 1 for u in tr.units):
        raise ConfigError("train.units must be three positive integers")
    if tr.activation not in ("relu", "tanh"):
        raise ConfigError("train.activation must be relu or tanh")
    if tr.epochs < 1:
        raise ConfigError("train.epochs must be at least 1")
    if not tr.learning_rate > 0:
        raise ConfigError("train.learning_rate must be positive")
    if not 0.0 < tr.lr_decay <= 1.0:
        raise ConfigError("train.lr_decay must lie in (0, 1]")

    if cfg.thresholds.theta <= 0 or cfg.thresholds.v <= 0:
        raise ConfigError("thresholds must be positive")
    if cfg.histogram.bins < 1 or not cfg.histogram.high > cfg.histogram.low:
        raise ConfigError("histogram needs bins >= 1 and high > low")
    if cfg.demo.max_states < 1:
        raise ConfigError("demo.max_states must be at least 1")


def check_referenced_paths(cfg: RunConfig) -> None:
    for label, value in (("grid.case_path", cfg.grid.case_path), ("loads.csv_path", cfg.loads.csv_path)):
        if value is not None and not Path(value).is_file():
            raise ConfigError(f"{label} {value} does not exist")
