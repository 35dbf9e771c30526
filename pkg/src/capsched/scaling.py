"""Autoscaling and routing.

The autoscaler keeps ``ceil(rps / saturated_load)`` instances saturated per
function. Surplus instances are first released to the cached state (they
stop receiving requests but stay warm) and only evicted later; a later rise
re-activates cached instances in place when the node still has room.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .cluster import Cluster
from .model import FunctionSpec, InstanceRecord, InstanceState, NodeState
from .scheduler import BaseScheduler, CapacityScheduler

S = InstanceState

RUNTIME_PRESETS = {"cfork": 8.4, "docker": 85.5}


@dataclass
class ScalingConfig:
    release_duration_s: float = 45.0
    keep_alive_s: float = 60.0
    logical_start_ms: float = 0.5
    runtime: str = "cfork"
    dual_staged: bool = True
    migration: bool = True
    # a stranded cached instance may open a new node when no existing one has room
    migration_scale_out: bool = True

    def validate(self) -> None:
        errors = []
        if self.runtime not in RUNTIME_PRESETS:
            errors.append(f"unknown runtime {self.runtime!r}; choose from {sorted(RUNTIME_PRESETS)}")
        if not 0 <= self.logical_start_ms < 1:
            errors.append("logical_start_ms must be in [0, 1)")
        if self.release_duration_s <= 0 or self.keep_alive_s <= 0:
            errors.append("release and keep-alive durations must be positive")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def init_ms(self) -> float:
        return RUNTIME_PRESETS[self.runtime]

    @property
    def staged(self) -> bool:
        """Dual staging is in effect only when release precedes eviction."""
        return self.dual_staged and self.release_duration_s < self.keep_alive_s


def expected_saturated(spec: FunctionSpec, rps: float) -> int:
    if rps < 0:
        raise ValueError("rps must be non-negative")
    if rps == 0:
        return 0
    # tolerate float noise from rps built as level * saturated_load
    return max(1, math.ceil(rps / spec.saturated_load_rps - 1e-9))


def route_load(spec: FunctionSpec, rps: float, saturated: list[InstanceRecord]) -> tuple[dict[str, float], bool]:
    """Equal split over saturated instances; cached ones get nothing.

    Returns the assignment and a flag that is True when the per-instance
    load exceeds the saturated load (instances still starting or none at all).
    """
    if not saturated:
        return {}, rps > 0
    share = rps / len(saturated)
    return {r.id: share for r in saturated}, share > spec.saturated_load_rps + 1e-9


def select_release_victims(cluster: Cluster, function_id: str, k: int) -> list[InstanceRecord]:
    """Release first where re-activation is least likely to fit later."""
    sat = cluster.saturated_total(function_id)
    if k > sat:
        raise ValueError(f"cannot release {k} of {sat} saturated instances")
    scored = []
    for node in cluster.nodes.values():
        info = node.concurrency(function_id)
        if info.saturated == 0:
            continue
        headroom = node.headroom(function_id) or 0
        scored.append((-(info.total - headroom), node.id))
    victims: list[InstanceRecord] = []
    for _, nid in sorted(scored):
        if len(victims) == k:
            break
        recs = cluster.on_node(nid, function_id, S.SATURATED)
        victims += recs[: k - len(victims)]
    return victims


@dataclass
class ScalingStats:
    releases: int = 0
    evictions: int = 0
    logical_starts: int = 0
    real_cold_starts: int = 0
    # re-activations: instances needed while cached ones were available
    reactivations: int = 0
    reactivation_cold_starts: int = 0
    migrations: int = 0
    migration_failures: int = 0
    background_ms: float = 0.0
    background_inferences: int = 0
    # per scheduled instance: its share of the decision time, and how long it waited
    schedule_ms: list[float] = field(default_factory=list)
    schedule_wait_ms: list[float] = field(default_factory=list)
    # (path, instances admitted, first contact of the function) per placement decision
    placements: list[tuple[str, int, bool]] = field(default_factory=list)
    schedule_inferences: int = 0
    cold_start_e2e_ms: list[float] = field(default_factory=list)
    cold_start_wait_e2e_ms: list[float] = field(default_factory=list)
    logical_start_ms: list[float] = field(default_factory=list)
    scale_outs: int = 0


class Autoscaler:
    """Reacts to load changes and fires release, eviction and keep-alive timers.

    ``post(time_us, kind, key, token)`` schedules a timer; the event loop
    calls :meth:`on_timer` with the same arguments when it fires. A timer
    whose token no longer matches is ignored.
    """

    def __init__(
        self,
        cluster: Cluster,
        scheduler: BaseScheduler,
        config: ScalingConfig,
        post: Callable[[int, str, str, int], None],
        log: Callable[[dict], None] | None = None,
    ):
        config.validate()
        self.cluster = cluster
        self.scheduler = scheduler
        self.config = config
        self.post = post
        self.log = log or (lambda rec: None)
        self.specs: Mapping[str, FunctionSpec] = cluster.specs
        self.rps: dict[str, float] = {}
        self.drop_deadline: dict[str, int] = {}
        self.evict_deadline: dict[str, int] = {}
        self.stats = ScalingStats()
        self.contacted: set[str] = set()
        self.staged = config.staged and isinstance(scheduler, CapacityScheduler)

    @property
    def engine(self):
        return getattr(self.scheduler, "engine", None)

    def _us(self, seconds: float) -> int:
        return int(round(seconds * 1_000_000))

    def _action(self, now: int, fid: str, action: str, node: str | None, ms: float) -> None:
        self.log({"type": "scaling", "t_us": now, "function": fid, "action": action, "node": node, "latency_ms": ms})

    def _enqueue(self, node: NodeState, reason: str, now: int) -> None:
        if self.engine is not None and node.id in self.cluster.nodes:
            self.engine.enqueue_update(node, reason, now)

    # load

    def on_load_change(self, function_id: str, rps: float, now: int) -> None:
        if function_id not in self.specs:
            raise KeyError(f"unknown function {function_id!r}")
        self.rps[function_id] = rps
        self.reconcile(function_id, now)

    def reconcile(self, fid: str, now: int) -> None:
        expected = expected_saturated(self.specs[fid], self.rps.get(fid, 0.0))
        sat = self.cluster.saturated_total(fid)
        if expected >= sat:
            self.drop_deadline.pop(fid, None)
            if expected > sat:
                self.scale_up(fid, expected - sat, now)
            return
        if fid not in self.drop_deadline:
            wait = self.config.release_duration_s if self.staged else self.config.keep_alive_s
            deadline = now + self._us(wait)
            self.drop_deadline[fid] = deadline
            self.post(deadline, "drop", fid, deadline)

    def scale_up(self, fid: str, need: int, now: int) -> None:
        cached = self.cluster.cached_total(fid) if self.staged else 0
        reactivations = min(need, cached)
        logical = 0
        if reactivations:
            logical = self.logical_starts(fid, reactivations, now)
            self.stats.reactivations += reactivations
            self.stats.reactivation_cold_starts += reactivations - logical
        remaining = need - logical
        if remaining:
            self.cold_start(fid, remaining, now)

    def logical_starts(self, fid: str, k: int, now: int) -> int:
        sched = self.scheduler
        assert isinstance(sched, CapacityScheduler)
        holders = []
        for node in self.cluster.nodes.values():
            if node.concurrency(fid).cached > 0:
                h = node.headroom(fid) or 0
                holders.append((fid in node.full_for, -h, node.id))
        done = 0
        for _, _, nid in sorted(holders):
            if done == k:
                break
            node = self.cluster.nodes[nid]
            ms = self.config.logical_start_ms
            if sched.usable_entry(node, fid):
                room = node.headroom(fid)
            else:
                cap, cost, events = sched.sync_capacity(node, fid, now)
                ms += cost
                self.stats.schedule_inferences += events
                room = cap - node.concurrency(fid).saturated
            n = min(k - done, room, node.concurrency(fid).cached)
            if n <= 0:
                continue
            for rec in self.cluster.on_node(nid, fid, S.CACHED)[:n]:
                self.cluster.transition(rec, S.SATURATED, now, cause="logical_start")
                self.evict_deadline.pop(rec.id, None)
                self.stats.logical_start_ms.append(ms)
            node.pending[fid] = node.pending.get(fid, 0) + n
            self._enqueue(node, "LogicalStart", now)
            self._action(now, fid, "LogicalStart", nid, ms)
            self.stats.logical_starts += n
            done += n
        return done

    def cold_start(self, fid: str, k: int, now: int) -> None:
        out = self.scheduler.place(fid, k, now)
        init = self.config.init_ms
        self.stats.real_cold_starts += k
        self.stats.scale_outs += out.scale_outs
        self.stats.schedule_inferences += out.inference_events
        share = out.amortized_ms
        first = fid not in self.contacted
        self.contacted.add(fid)
        self.stats.placements += [(p.path, p.admitted, first) for p in out.placements]
        for rec, wait, _ in out.instances:
            self.stats.schedule_ms.append(share)
            self.stats.schedule_wait_ms.append(wait)
            self.stats.cold_start_e2e_ms.append(share + init)
            self.stats.cold_start_wait_e2e_ms.append(wait + init)
            self._action(now, fid, "RealColdStart", rec.node_id, share + init)

    # timers

    def on_timer(self, kind: str, key: str, token: int, now: int) -> None:
        if kind == "drop":
            if self.drop_deadline.get(key) != token:
                return
            del self.drop_deadline[key]
            self.on_sustained_drop(key, now)
        elif kind == "evict":
            if self.evict_deadline.get(key) != token:
                return
            del self.evict_deadline[key]
            rec = self.cluster.instances.get(key)
            if rec is not None and rec.state is S.CACHED:
                self.evict(rec, now)
        else:
            raise ValueError(f"unknown timer {kind!r}")

    def on_sustained_drop(self, fid: str, now: int) -> None:
        expected = expected_saturated(self.specs[fid], self.rps.get(fid, 0.0))
        surplus = self.cluster.saturated_total(fid) - expected
        if surplus <= 0:
            return
        victims = select_release_victims(self.cluster, fid, surplus)
        if not self.staged:
            for rec in victims:
                self.cluster.transition(rec, S.CACHED, now, cause="keep_alive")
                self.evict(rec, now)
            return
        # eviction lands keep_alive after the load dropped, i.e. release earlier
        linger = self._us(self.config.keep_alive_s - self.config.release_duration_s)
        touched = {}
        for rec in victims:
            self.cluster.transition(rec, S.CACHED, now, cause="release")
            deadline = now + linger
            self.evict_deadline[rec.id] = deadline
            self.post(deadline, "evict", rec.id, deadline)
            touched[rec.node_id] = touched.get(rec.node_id, 0) + 1
            self.stats.releases += 1
        for nid, n in sorted(touched.items()):
            self._action(now, fid, "Release", nid, 0.0)
            self._enqueue(self.cluster.nodes[nid], "Release", now)

    def evict(self, rec: InstanceRecord, now: int) -> None:
        node = self.cluster.nodes[rec.node_id]
        self.cluster.transition(rec, S.EVICTED, now, cause="evict")
        self.stats.evictions += 1
        self._action(now, rec.function_id, "Evict", node.id, 0.0)
        if not node.empty:
            self._enqueue(node, "Evict", now)

    # migration

    def migrate_stranded(self, node: NodeState, now: int) -> int:
        """Move cached instances off ``node`` where they could no longer be re-activated."""
        if not (self.staged and self.config.migration):
            return 0
        sched = self.scheduler
        assert isinstance(sched, CapacityScheduler)
        moved = 0
        for fid in sorted(node.roster):
            entry = node.capacity_table.get(fid)
            info = node.concurrency(fid)
            if entry is None or info.cached == 0:
                continue
            excess = min(info.cached, info.total - entry.capacity)
            for rec in self.cluster.on_node(node.id, fid, S.CACHED)[:max(0, excess)]:
                target, cost, events = sched.migration_target(
                    fid, node.id, now, allow_scale_out=self.config.migration_scale_out
                )
                self.stats.background_ms += cost
                self.stats.background_inferences += events
                if target is None:
                    self.stats.migration_failures += 1
                    break
                new = self.cluster.create_instance(fid, target, now, cause="migrate")
                self.cluster.transition(new, S.CACHED, now, cause="migrate")
                deadline = self.evict_deadline.pop(rec.id, None)
                if deadline is not None:
                    self.evict_deadline[new.id] = deadline
                    self.post(deadline, "evict", new.id, deadline)
                self.cluster.transition(rec, S.EVICTED, now, cause="migrate")
                self.stats.background_ms += self.config.init_ms
                self.stats.migrations += 1
                moved += 1
                self._action(now, fid, "Migrate", target.id, self.config.init_ms)
                self._enqueue(target, "Admit", now)
        if moved and not node.empty:
            self._enqueue(node, "Evict", now)
        return moved
