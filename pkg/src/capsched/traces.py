"""Stepwise RPS traces and their generators."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .oracle import stream
from .scaling import expected_saturated

Breakpoints = list[tuple[int, float]]


class TraceError(ValueError):
    pass


@dataclass
class TraceSignal:
    """Per-function piecewise-constant RPS; each breakpoint holds until the next."""

    series: dict[str, Breakpoints]
    horizon_ms: int

    def __post_init__(self):
        if self.horizon_ms <= 0:
            raise TraceError("horizon must be positive")
        for fid, pts in self.series.items():
            last = -1
            for t, rps in pts:
                if t <= last:
                    raise TraceError(f"{fid}: breakpoints must be strictly increasing in time")
                if not rps >= 0:
                    raise TraceError(f"{fid}: rps must be non-negative")
                if t > self.horizon_ms:
                    raise TraceError(f"{fid}: breakpoint at {t} ms beyond horizon")
                last = t

    @property
    def functions(self) -> list[str]:
        return sorted(self.series)

    def rps_at(self, function_id: str, t_ms: float) -> float:
        pts = self.series.get(function_id, [])
        value = 0.0
        for t, rps in pts:
            if t > t_ms:
                break
            value = rps
        return value

    def changes(self) -> list[tuple[int, str, float]]:
        """All breakpoints ordered by (time, function)."""
        return sorted((t, fid, rps) for fid, pts in self.series.items() for t, rps in pts)

    def to_jsonl(self, path: str | Path) -> None:
        lines = [json.dumps({"t_ms": t, "function": fid, "rps": rps}) for t, fid, rps in self.changes()]
        lines.append(json.dumps({"horizon_ms": self.horizon_ms}))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "TraceSignal":
        series: dict[str, Breakpoints] = {}
        horizon = None
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceError(f"line {n}: {e}") from None
            if "horizon_ms" in rec:
                horizon = int(rec["horizon_ms"])
                continue
            try:
                series.setdefault(str(rec["function"]), []).append((int(rec["t_ms"]), float(rec["rps"])))
            except KeyError as e:
                raise TraceError(f"line {n}: missing field {e}") from None
        if horizon is None:
            last = max((t for pts in series.values() for t, _ in pts), default=0)
            horizon = last + 1000
        for pts in series.values():
            pts.sort()
        return cls(series, horizon)


def _s(seconds: float) -> int:
    return int(round(seconds * 1000))


def timer(
    function_id: str,
    saturated_load: float,
    lo: int,
    hi: int,
    period_s: float,
    horizon_s: float,
) -> TraceSignal:
    """Square wave holding ``lo`` then ``hi`` saturated instances for half a period each."""
    if lo < 0 or hi < lo or hi == 0:
        raise TraceError("need 0 <= lo <= hi, hi > 0")
    if period_s <= 0 or horizon_s <= 0:
        raise TraceError("period and horizon must be positive")
    half = period_s / 2
    pts = []
    k = 0
    while k * half < horizon_s:
        level = lo if k % 2 == 0 else hi
        pts.append((_s(k * half), level * saturated_load))
        k += 1
    return TraceSignal({function_id: pts}, _s(horizon_s))


def alternating(
    function_id: str,
    saturated_load: float,
    half_period_s: float,
    horizon_s: float,
    keep_alive_s: float = 60.0,
) -> TraceSignal:
    """Concurrency toggling 1 -> 0 -> 1 with gaps long enough for every instance to be evicted."""
    if half_period_s <= keep_alive_s:
        raise TraceError("half period must exceed the keep-alive duration")
    pts = []
    k = 0
    while k * half_period_s < horizon_s:
        pts.append((_s(k * half_period_s), saturated_load if k % 2 == 0 else 0.0))
        k += 1
    return TraceSignal({function_id: pts}, _s(horizon_s))


def poisson(
    rates: Mapping[str, float],
    window_s: float,
    horizon_s: float,
    seed: int,
) -> TraceSignal:
    """Arrival counts per window drawn Poisson(rate * window), turned back into an RPS step."""
    if window_s <= 0:
        raise TraceError("window must be positive")
    series = {}
    n = int(np.ceil(horizon_s / window_s))
    for fid in sorted(rates):
        if rates[fid] < 0:
            raise TraceError(f"{fid}: negative rate")
        rng = stream(seed, f"trace/poisson/{fid}")
        counts = rng.poisson(rates[fid] * window_s, size=n)
        series[fid] = [(_s(i * window_s), float(c) / window_s) for i, c in enumerate(counts)]
    return TraceSignal(series, _s(horizon_s))


@dataclass(frozen=True)
class BurstyParams:
    horizon_s: float = 1800.0
    step_s: float = 10.0
    n_replicated: int = 3
    n_sparse: int = 3
    replicated_level: tuple[float, float] = (14.0, 26.0)
    sparse_level: tuple[float, float] = (1.0, 6.0)
    walk_sigma: float = 0.08
    burst_prob: float = 0.02
    dip_prob: float = 0.03
    dip_steps: tuple[int, int] = (4, 6)
    target_share: float = 0.56
    concurrency_threshold: int = 12


def concentration_share(levels: Mapping[str, Sequence[int]], threshold: int = 12) -> float:
    """Share of instance-time contributed while a function's concurrency exceeds ``threshold``."""
    total = above = 0
    for seq in levels.values():
        arr = np.asarray(seq)
        total += int(arr.sum())
        above += int(arr[arr > threshold].sum())
    return above / total if total else 0.0


def trace_concurrency(trace: TraceSignal, saturated_load: Mapping[str, float], step_ms: int = 1000) -> dict[str, list[int]]:
    """Expected saturated instances sampled every ``step_ms``."""
    out = {}
    for fid in trace.functions:
        spec = _LoadOnly(saturated_load[fid])
        out[fid] = [expected_saturated(spec, trace.rps_at(fid, t)) for t in range(0, trace.horizon_ms, step_ms)]
    return out


@dataclass(frozen=True)
class _LoadOnly:
    saturated_load_rps: float


def _walk(rng: np.random.Generator, n: int, p: BurstyParams) -> np.ndarray:
    """Multiplicative random walk around 1 with occasional bursts and dips."""
    x = np.empty(n)
    log_level = 0.0
    dip_left = 0
    for i in range(n):
        log_level = 0.9 * log_level + rng.normal(0.0, p.walk_sigma)
        m = np.exp(log_level)
        if dip_left > 0:
            m *= 0.35
            dip_left -= 1
        elif rng.random() < p.dip_prob:
            dip_left = int(rng.integers(p.dip_steps[0], p.dip_steps[1] + 1)) - 1
            m *= 0.35
        elif rng.random() < p.burst_prob:
            m *= 1.6
        x[i] = m
    return x


def bursty_replicated(
    saturated_load: Mapping[str, float],
    seed: int,
    params: BurstyParams = BurstyParams(),
) -> TraceSignal:
    """Skewed multi-function load: a few highly replicated functions and a sparse tail.

    Replicated levels are rescaled by bisection so the share of instance-time
    from functions above ``concurrency_threshold`` matches ``target_share``.
    """
    fids = sorted(saturated_load)
    need = params.n_replicated + params.n_sparse
    if len(fids) < need:
        raise TraceError(f"need {need} functions, got {len(fids)}")
    rng = stream(seed, "trace/bursty")
    n = int(np.ceil(params.horizon_s / params.step_s))
    replicated = fids[: params.n_replicated]
    sparse = fids[params.n_replicated : need]
    shapes = {}
    for fid in replicated:
        base = rng.uniform(*params.replicated_level)
        shapes[fid] = base * _walk(rng, n, params)
    for fid in sparse:
        base = rng.uniform(*params.sparse_level)
        shapes[fid] = base * _walk(rng, n, params)
    # stagger breakpoints so functions never change load in the same millisecond
    offsets = {fid: int(rng.integers(1, 997)) for fid in fids[:need]}

    def levels(scale: float) -> dict[str, np.ndarray]:
        out = {}
        for fid in fids[:need]:
            s = scale if fid in replicated else 1.0
            out[fid] = np.maximum(0, np.ceil(s * shapes[fid] - 0.5)).astype(int)
        return out

    lo, hi = 0.3, 3.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if concentration_share(levels(mid), params.concurrency_threshold) < params.target_share:
            lo = mid
        else:
            hi = mid
    final = levels(0.5 * (lo + hi))
    horizon = _s(params.horizon_s)
    series = {}
    for fid, lv in final.items():
        L = saturated_load[fid]
        pts = []
        prev = None
        for i, c in enumerate(lv):
            t = _s(i * params.step_s) + (offsets[fid] if i else 0)
            if t >= horizon:
                break
            # a level of c instances is driven by an rps just under c * L
            rps = max(0.0, (c - 0.5) * L) if c > 0 else 0.0
            if rps != prev:
                pts.append((t, rps))
                prev = rps
        series[fid] = pts
    return TraceSignal(series, horizon)
