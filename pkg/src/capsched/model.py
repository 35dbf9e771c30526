"""Core data types shared by the oracle, predictor, scheduler and simulator."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

DEFAULT_PROFILE_WIDTH = 13
DEFAULT_QOS_MULTIPLIER = 1.2

ResourceVector = tuple[float, ...]


class SpecError(ValueError):
    """Raised when a FunctionSpec fails validation; carries every violation."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ProfileVector:
    features: tuple[float, ...]

    def __post_init__(self):
        for v in self.features:
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"profile entries must be finite and >= 0, got {v!r}")

    def __len__(self) -> int:
        return len(self.features)


@dataclass(frozen=True, slots=True)
class ConcurrencyInfo:
    saturated: int = 0
    cached: int = 0

    def __post_init__(self):
        if self.saturated < 0 or self.cached < 0:
            raise ValueError(f"negative concurrency: {self.saturated}/{self.cached}")

    @property
    def total(self) -> int:
        return self.saturated + self.cached

    def __bool__(self) -> bool:
        return self.total > 0


Colocation = Mapping[str, ConcurrencyInfo]


@dataclass(frozen=True)
class FunctionSpec:
    id: str
    solo_latency_ms: float
    profile: ProfileVector
    saturated_load_rps: float
    qos_multiplier: float = DEFAULT_QOS_MULTIPLIER
    configured_resources: ResourceVector = (8.0, 8.0)
    max_capacity_bound: int = 16

    @property
    def qos_threshold_ms(self) -> float:
        return qos_threshold(self)


def qos_threshold(spec: FunctionSpec) -> float:
    """Tail-latency bound the function must meet: multiplier times solo latency."""
    return spec.qos_multiplier * spec.solo_latency_ms


def validate_spec(spec: FunctionSpec, oracle_demand: Sequence[float] | None = None) -> FunctionSpec:
    """Return ``spec`` unchanged or raise :class:`SpecError` listing every violation.

    ``oracle_demand`` is the per-instance demand expressed in the same units as
    ``configured_resources``; when given, configured resources must cover it on
    every axis.
    """
    errors = []
    if not spec.solo_latency_ms > 0:
        errors.append("solo latency must be positive")
    if not spec.saturated_load_rps > 0:
        errors.append("saturated load must be positive")
    if not spec.qos_multiplier >= 1:
        errors.append("qos multiplier must be >= 1")
    if spec.max_capacity_bound < 1:
        errors.append("max capacity bound must be a positive integer")
    if any(r < 0 for r in spec.configured_resources):
        errors.append("configured resources must be non-negative")
    if oracle_demand is not None:
        if len(oracle_demand) < len(spec.configured_resources):
            errors.append("demand vector shorter than configured resources")
        for i, conf in enumerate(spec.configured_resources):
            if i < len(oracle_demand) and conf < oracle_demand[i]:
                errors.append(f"configured below demand on resource {i}")
    if errors:
        raise SpecError(errors)
    return spec


class InstanceState(str, enum.Enum):
    SATURATED = "Saturated"
    CACHED = "Cached"
    EVICTED = "Evicted"


# (from, to); None stands for creation.
LEGAL_TRANSITIONS = frozenset(
    {
        (None, InstanceState.SATURATED),
        (InstanceState.SATURATED, InstanceState.CACHED),
        (InstanceState.CACHED, InstanceState.SATURATED),
        (InstanceState.CACHED, InstanceState.EVICTED),
    }
)


class IllegalTransition(RuntimeError):
    pass


@dataclass
class InstanceRecord:
    id: str
    function_id: str
    node_id: str
    state: InstanceState
    state_since: int  # simulation time, microseconds

    def transition(self, new_state: InstanceState, now: int) -> None:
        if (self.state, new_state) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(f"{self.id}: {self.state.value} -> {new_state.value}")
        self.state = new_state
        self.state_since = now


@dataclass
class CapacityEntry:
    capacity: int
    computed_at: int
    stale: bool = False
    # roster the capacity was computed against; fast-path admissions are only
    # sound while no other function has grown past it
    basis: dict[str, ConcurrencyInfo] = field(default_factory=dict)

    def basis_saturated(self, function_id: str) -> int:
        info = self.basis.get(function_id)
        return info.saturated if info else 0


@dataclass
class NodeState:
    id: str
    capacity: ResourceVector
    roster: dict[str, ConcurrencyInfo] = field(default_factory=dict)
    capacity_table: dict[str, CapacityEntry] = field(default_factory=dict)
    pending: dict[str, int] = field(default_factory=dict)
    full_for: set[str] = field(default_factory=set)
    created_at: int = 0

    def concurrency(self, function_id: str) -> ConcurrencyInfo:
        return self.roster.get(function_id, ConcurrencyInfo())

    def adjust(self, function_id: str, d_saturated: int = 0, d_cached: int = 0) -> ConcurrencyInfo:
        cur = self.concurrency(function_id)
        new = ConcurrencyInfo(cur.saturated + d_saturated, cur.cached + d_cached)
        if new:
            self.roster[function_id] = new
        else:
            self.roster.pop(function_id, None)
        return new

    @property
    def instance_count(self) -> int:
        return sum(c.total for c in self.roster.values())

    @property
    def empty(self) -> bool:
        return not self.roster

    def allocated(self, specs: Mapping[str, FunctionSpec]) -> ResourceVector:
        """Configured resources held by every live instance (saturated or cached)."""
        out = [0.0] * len(self.capacity)
        for fid, info in self.roster.items():
            conf = specs[fid].configured_resources
            for i in range(len(out)):
                out[i] += conf[i] * info.total
        return tuple(out)

    def free_configured(self, specs: Mapping[str, FunctionSpec]) -> float:
        alloc = self.allocated(specs)
        return sum(c - a for c, a in zip(self.capacity, alloc))

    def headroom(self, function_id: str) -> int | None:
        """Fast-path headroom (capacity - basis saturated - pending), or None without an entry."""
        entry = self.capacity_table.get(function_id)
        if entry is None:
            return None
        return entry.capacity - entry.basis_saturated(function_id) - self.pending.get(function_id, 0)

    def grown_since(self, function_id: str) -> bool:
        """True if the roster grew beyond the entry's basis in a way its capacity ignores."""
        entry = self.capacity_table[function_id]
        for fid, info in self.roster.items():
            base = entry.basis.get(fid, ConcurrencyInfo())
            if fid == function_id:
                if info.cached > base.cached:
                    return True
            elif info.saturated > base.saturated or info.cached > base.cached:
                return True
        return False
