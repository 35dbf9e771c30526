"""Scenario configuration: nested dataclasses loaded from YAML with dotted overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .oracle import OracleParams
from .scaling import ScalingConfig

POLICIES = ("capsched", "gsight", "kube")
TRACE_KINDS = ("timer", "alternating", "poisson", "bursty-replicated", "file")


class ConfigError(ValueError):
    pass


@dataclass
class ClusterConfig:
    node_capacity: tuple[float, float] = (48.0, 48.0)


@dataclass
class FunctionsConfig:
    count: int = 6
    saturated_load_rps: tuple[float, float] = (5.0, 20.0)
    qos_multiplier: float = 1.2
    configured_resources: tuple[float, float] = (8.0, 8.0)
    max_capacity_bound: int = 16


@dataclass
class TraceConfig:
    kind: str = "bursty-replicated"
    path: str | None = None
    horizon_s: float = 1800.0
    # timer / alternating
    function: str = "f1"
    lo: int = 1
    hi: int = 6
    period_s: float = 300.0
    half_period_s: float = 90.0
    # poisson
    rate_rps: float = 20.0
    window_s: float = 10.0
    # bursty-replicated
    step_s: float = 10.0
    target_share: float = 0.56


@dataclass
class PredictorConfig:
    kind: str = "forest"  # or "perfect"
    model_path: str | None = None
    n_samples: int = 2000
    n_trees: int = 50
    max_depth: int = 12
    min_leaf: int = 2
    c0_ms: float = 20.0
    c1_ms_per_row: float = 0.02


@dataclass
class SchedulerConfig:
    lookup_ms: float = 0.5
    # nodes without an entry probed per batched inference on the slow path
    probe_batch: int = 4


@dataclass
class MonitorConfig:
    enabled: bool = False
    error_threshold: float = 0.15
    consecutive_bad_limit: int = 3
    retrain_limit: int = 5
    # ticks between two predictability checks of the same function
    check_every_s: float = 10.0


@dataclass
class ScenarioConfig:
    policy: str = "capsched"
    seed: int | None = None
    eval_window_s: float = 1.0
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    functions: FunctionsConfig = field(default_factory=FunctionsConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    scaling: ScalingConfig = field(default_factory=ScalingConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    oracle: OracleParams = field(default_factory=OracleParams)

    def validate(self) -> None:
        errors = []
        if self.policy not in POLICIES:
            errors.append(f"policy must be one of {POLICIES}")
        if self.seed is None:
            errors.append("seed is required")
        if self.eval_window_s <= 0:
            errors.append("eval_window_s must be positive")
        if self.trace.kind not in TRACE_KINDS:
            errors.append(f"trace.kind must be one of {TRACE_KINDS}")
        if self.trace.kind == "file" and not self.trace.path:
            errors.append("trace.path is required for kind 'file'")
        if self.predictor.kind not in ("forest", "perfect"):
            errors.append("predictor.kind must be 'forest' or 'perfect'")
        if self.functions.count < 1:
            errors.append("functions.count must be positive")
        lo, hi = self.functions.saturated_load_rps
        if not 0 < lo <= hi:
            errors.append("functions.saturated_load_rps must be a positive (lo, hi) range")
        if any(c <= 0 for c in self.cluster.node_capacity):
            errors.append("cluster.node_capacity must be positive")
        try:
            self.scaling.validate()
        except ValueError as e:
            errors.append(f"scaling: {e}")
        if errors:
            raise ConfigError("; ".join(errors))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return build(tp, value, where)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], x, where) for x in value)
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} values")
        return tuple(_coerce(a, x, where) for a, x in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def build(cls, data: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where or 'config'}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}".lstrip(".")) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a nested dict; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    cur = data
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"override {key!r} descends into a scalar")
    cur[parts[-1]] = yaml.safe_load(raw)


def load_config(path: str | Path | None = None, overrides=(), seed: int | None = None) -> ScenarioConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"bad YAML in {path}: {e}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError("config root must be a mapping")
        data = loaded or {}
    for o in overrides:
        apply_override(data, o)
    if seed is not None:
        data["seed"] = seed
    return build(ScenarioConfig, data)
