"""Synthetic contention ground truth.

Each function has a hidden per-instance demand (fraction of a node, per
resource axis) and a sensitivity per axis. The p90 latency of a function on a
node is its solo latency inflated by a convex penalty once the node's
aggregate utilization on an axis passes a contention threshold. Cached
instances contribute a fraction ``gamma`` of a saturated instance's demand.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import (
    DEFAULT_PROFILE_WIDTH,
    ConcurrencyInfo,
    Colocation,
    FunctionSpec,
    ProfileVector,
    qos_threshold,
)


@dataclass(frozen=True)
class OracleParams:
    resource_axes: int = 4
    theta: float | tuple[float, ...] = 0.6
    alpha: float = 2.0
    gamma: float = 0.1
    noise_sigma: float = 0.05
    seed: int = 0
    profile_width: int = DEFAULT_PROFILE_WIDTH

    def __post_init__(self):
        if self.resource_axes < 1:
            raise ValueError("resource_axes must be positive")
        th = self.theta_vector
        if len(th) != self.resource_axes or np.any(th < 0) or np.any(th > 1):
            raise ValueError("theta must lie in [0, 1] on every axis")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def theta_vector(self) -> np.ndarray:
        if isinstance(self.theta, (int, float)):
            return np.full(self.resource_axes, float(self.theta))
        return np.asarray(self.theta, dtype=float)


@dataclass(frozen=True)
class FunctionGroundTruth:
    demand: tuple[float, ...]
    sensitivity: tuple[float, ...]
    solo_latency_ms: float

    def __post_init__(self):
        if any(not 0 < d <= 1 for d in self.demand):
            raise ValueError("demand entries must lie in (0, 1]")
        if any(not np.isfinite(s) or s < 0 for s in self.sensitivity):
            raise ValueError("sensitivity must be finite and non-negative")
        if len(self.sensitivity) != len(self.demand):
            raise ValueError("demand and sensitivity lengths differ")
        if not self.solo_latency_ms > 0:
            raise ValueError("solo latency must be positive")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named random stream derived from a run seed."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


def profile_expansion(truth: FunctionGroundTruth, width: int = DEFAULT_PROFILE_WIDTH) -> np.ndarray:
    """Deterministic profile features: demand verbatim, sensitivity, then summaries."""
    d = np.asarray(truth.demand)
    s = np.asarray(truth.sensitivity)
    extra = [d.sum(), d.max(), float(d @ s), s.max(), float(np.mean(d * d)) * 10.0]
    full = np.concatenate([d, s, extra])
    if len(full) >= width:
        return full[:width].copy()
    return np.concatenate([full, np.zeros(width - len(full))])


def _noise_factor(rng: np.random.Generator, sigma: float, size=None):
    if sigma == 0:
        return 1.0 if size is None else np.ones(size)
    return np.maximum(0.01, 1.0 + rng.normal(0.0, sigma, size))


class ContentionOracle:
    def __init__(self, params: OracleParams, truths: Mapping[str, FunctionGroundTruth]):
        self.params = params
        self.truths = dict(truths)
        self._theta = params.theta_vector
        for fid, t in self.truths.items():
            if len(t.demand) != params.resource_axes:
                raise ValueError(f"{fid}: demand has {len(t.demand)} axes, expected {params.resource_axes}")
        self._demand = {f: np.asarray(t.demand) for f, t in self.truths.items()}
        self._sens = {f: np.asarray(t.sensitivity) for f, t in self.truths.items()}

    def _truth(self, fid: str) -> FunctionGroundTruth:
        try:
            return self.truths[fid]
        except KeyError:
            raise KeyError(f"unknown function {fid!r}") from None

    def utilization(self, colocation: Colocation) -> np.ndarray:
        u = np.zeros(self.params.resource_axes)
        g = self.params.gamma
        for fid, info in colocation.items():
            self._truth(fid)
            u += (info.saturated + g * info.cached) * self._demand[fid]
        return u

    def true_latency(self, target: str, colocation: Colocation) -> float:
        """Noise-free p90 latency (ms) of ``target`` under ``colocation``."""
        truth = self._truth(target)
        over = np.maximum(0.0, self.utilization(colocation) - self._theta)
        penalty = float(self._sens[target] @ over**self.params.alpha)
        return truth.solo_latency_ms * (1.0 + penalty)

    def observe_sample(self, target: str, colocation: Colocation, rng: np.random.Generator) -> float:
        return self.true_latency(target, colocation) * _noise_factor(rng, self.params.noise_sigma)

    def solo_profile(self, target: str, rng: np.random.Generator) -> tuple[ProfileVector, float]:
        truth = self._truth(target)
        base = profile_expansion(truth, self.params.profile_width)
        noisy = base * _noise_factor(rng, self.params.noise_sigma, base.shape)
        latency = self.observe_sample(target, {target: ConcurrencyInfo(1, 0)}, rng)
        return ProfileVector(tuple(float(v) for v in noisy)), latency

    def demand_in_units(self, fid: str, node_capacity: Sequence[float]) -> tuple[float, ...]:
        """Per-instance demand on the leading axes, in the node's resource units."""
        d = self._truth(fid).demand
        return tuple(d[i] * node_capacity[i] for i in range(len(node_capacity)))

    def feasible(self, colocation: Colocation, specs: Mapping[str, FunctionSpec]) -> bool:
        """Every function with a saturated instance meets its QoS threshold."""
        return all(
            self.true_latency(fid, colocation) <= qos_threshold(specs[fid])
            for fid, info in colocation.items()
            if info.saturated > 0
        )

    def brute_force_capacity(
        self, target: str, colocation: Colocation, specs: Mapping[str, FunctionSpec]
    ) -> int:
        """Largest saturated count of ``target`` keeping every colocated function within QoS."""
        self._truth(target)
        bound = specs[target].max_capacity_bound
        cached = colocation.get(target, ConcurrencyInfo()).cached
        best = 0
        for c in range(bound + 1):
            trial = dict(colocation)
            trial[target] = ConcurrencyInfo(c, cached)
            if self.feasible(trial, specs):
                best = c
        return best


@dataclass
class GroundTruthRanges:
    demand: tuple[float, float] = (0.035, 0.085)
    sensitivity: tuple[float, float] = (2.0, 8.0)
    solo_latency_ms: tuple[float, float] = (40.0, 200.0)
    saturated_load_rps: tuple[float, float] = (5.0, 20.0)


def function_ids(n: int) -> list[str]:
    return [f"f{i + 1}" for i in range(n)]


def sample_ground_truth(
    n: int, params: OracleParams, rng: np.random.Generator, ranges: GroundTruthRanges | None = None
) -> dict[str, FunctionGroundTruth]:
    ranges = ranges or GroundTruthRanges()
    out = {}
    for fid in function_ids(n):
        demand = rng.uniform(*ranges.demand, params.resource_axes)
        sens = rng.uniform(*ranges.sensitivity, params.resource_axes)
        solo = rng.uniform(*ranges.solo_latency_ms)
        out[fid] = FunctionGroundTruth(
            demand=tuple(round(float(v), 6) for v in demand),
            sensitivity=tuple(round(float(v), 6) for v in sens),
            solo_latency_ms=round(float(solo), 3),
        )
    return out


def build_specs(
    oracle: ContentionOracle,
    rng: np.random.Generator,
    saturated_load: Mapping[str, float],
    configured_resources: tuple[float, ...] = (8.0, 8.0),
    qos_multiplier: float = 1.2,
    max_capacity_bound: int = 16,
) -> dict[str, FunctionSpec]:
    """Profile every function solo and assemble its spec.

    The QoS baseline uses the oracle's solo latency; the profile vector carries
    observation noise like any other profiling measurement.
    """
    specs = {}
    for fid in sorted(oracle.truths):
        profile, _ = oracle.solo_profile(fid, rng)
        specs[fid] = FunctionSpec(
            id=fid,
            solo_latency_ms=oracle.truths[fid].solo_latency_ms,
            profile=profile,
            saturated_load_rps=saturated_load[fid],
            qos_multiplier=qos_multiplier,
            configured_resources=tuple(configured_resources),
            max_capacity_bound=max_capacity_bound,
        )
    return specs
