"""Per-node capacity tables and their asynchronous refresh."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

from .model import CapacityEntry, ConcurrencyInfo, FunctionSpec, NodeState, qos_threshold
from .predictor import Predictor, Query

UPDATE_REASONS = ("Admit", "Evict", "Release", "LogicalStart", "NewFunction")


@dataclass
class ScanPlan:
    target: str
    start: int
    bound: int
    queries: list[Query]
    # (candidate, function) for each query, in order
    keys: list[tuple[int, str]]


def plan_scan(roster: Mapping[str, ConcurrencyInfo], target: str, specs: Mapping[str, FunctionSpec]) -> ScanPlan:
    if target not in specs:
        raise KeyError(f"unknown function {target!r}")
    own = roster.get(target, ConcurrencyInfo())
    bound = specs[target].max_capacity_bound
    start = max(1, own.saturated)
    queries: list[Query] = []
    keys: list[tuple[int, str]] = []
    neighbors = sorted(f for f, info in roster.items() if f != target and info.saturated > 0)
    for c in range(start, bound + 1):
        coloc = dict(roster)
        coloc[target] = ConcurrencyInfo(c, own.cached)
        queries.append((target, coloc))
        keys.append((c, target))
        for g in neighbors:
            queries.append((g, coloc))
            keys.append((c, g))
    return ScanPlan(target, start, bound, queries, keys)


def resolve_scan(plan: ScanPlan, predictions, specs: Mapping[str, FunctionSpec], current: int) -> int:
    """Largest c such that every candidate from the scan start up to c meets QoS."""
    if plan.start > plan.bound:
        return min(current, plan.bound)
    failing = set()
    for (c, fid), p in zip(plan.keys, predictions):
        if p > qos_threshold(specs[fid]):
            failing.add(c)
    for c in range(plan.start, plan.bound + 1):
        if c in failing:
            return c - 1
    return plan.bound


@dataclass
class CapacityResult:
    capacity: int
    cost_ms: float
    inference_events: int
    rows: int


def compute_capacity(
    roster: Mapping[str, ConcurrencyInfo],
    target: str,
    predictor: Predictor,
    specs: Mapping[str, FunctionSpec],
) -> CapacityResult:
    """Capacity of ``target`` on a node holding ``roster``, in one batched inference."""
    plan = plan_scan(roster, target, specs)
    current = roster.get(target, ConcurrencyInfo()).saturated
    if not plan.queries:
        return CapacityResult(min(current, plan.bound), 0.0, 0, 0)
    res = predictor.predict(plan.queries)
    cap = resolve_scan(plan, res.predictions, specs, current)
    return CapacityResult(cap, res.cost_ms, res.inference_events, len(plan.queries))


def snapshot(roster: Mapping[str, ConcurrencyInfo]) -> dict[str, ConcurrencyInfo]:
    return dict(roster)


def install_entry(node: NodeState, target: str, capacity: int, now: int) -> CapacityEntry:
    entry = CapacityEntry(capacity=capacity, computed_at=now, stale=False, basis=snapshot(node.roster))
    node.capacity_table[target] = entry
    node.pending[target] = 0
    if capacity < node.concurrency(target).saturated:
        node.full_for.add(target)
    else:
        node.full_for.discard(target)
    return entry


@dataclass
class UpdateTask:
    node_id: str
    reason: str
    enqueued_at: int
    completes_at: int
    rows: int
    followup: bool = False


def us(ms: float) -> int:
    return int(round(ms * 1000))


class CapacityEngine:
    """Keeps every node's table fresh off the scheduling critical path.

    At most one refresh runs per node; triggers arriving while one is in
    flight collapse into a single follow-up. ``post(time_us, node_id)`` asks
    the event loop to call :meth:`apply_update_completion` at that time.
    """

    def __init__(
        self,
        predictor: Predictor,
        specs: Mapping[str, FunctionSpec],
        post: Callable[[int, str], None],
        log: Callable[[dict], None] | None = None,
    ):
        self.predictor = predictor
        self.specs = specs
        self.post = post
        self.log = log or (lambda rec: None)
        self.in_flight: dict[str, UpdateTask] = {}
        self.async_inferences = 0
        self.async_cost_ms = 0.0
        self.tasks_started = 0

    def _refresh_rows(self, node: NodeState) -> list[ScanPlan]:
        return [plan_scan(node.roster, f, self.specs) for f in sorted(node.roster)]

    def enqueue_update(self, node: NodeState, reason: str, now: int) -> UpdateTask | None:
        if reason not in UPDATE_REASONS:
            raise ValueError(f"unknown update reason {reason!r}")
        task = self.in_flight.get(node.id)
        if task is not None:
            task.followup = True
            return task
        if node.empty:
            return None
        for entry in node.capacity_table.values():
            entry.stale = True
        rows = sum(len(p.queries) for p in self._refresh_rows(node))
        cost = self.predictor.cost_model.cost(rows)
        task = UpdateTask(node.id, reason, now, now + us(cost), rows)
        self.in_flight[node.id] = task
        self.tasks_started += 1
        self.post(task.completes_at, node.id)
        return task

    def recompute(self, node: NodeState, now: int) -> tuple[float, int]:
        """Synchronously recompute every roster function's entry with one batched inference."""
        plans = self._refresh_rows(node)
        queries = [q for p in plans for q in p.queries]
        for fid in list(node.capacity_table):
            if fid not in node.roster:
                del node.capacity_table[fid]
                node.pending.pop(fid, None)
                node.full_for.discard(fid)
        if not queries:
            for p in plans:
                install_entry(node, p.target, resolve_scan(p, [], self.specs, node.concurrency(p.target).saturated), now)
            return 0.0, 0
        res = self.predictor.predict(queries)
        i = 0
        for p in plans:
            preds = res.predictions[i : i + len(p.queries)]
            i += len(p.queries)
            cap = resolve_scan(p, preds, self.specs, node.concurrency(p.target).saturated)
            install_entry(node, p.target, cap, now)
        return res.cost_ms, res.inference_events

    def apply_update_completion(self, node: NodeState | None, now: int) -> UpdateTask | None:
        """Land the in-flight refresh for ``node``; returns the task that completed."""
        if node is None:
            return None
        task = self.in_flight.pop(node.id, None)
        if task is None:
            return None
        cost, events = self.recompute(node, now)
        self.async_inferences += events
        self.async_cost_ms += cost
        self.log(
            {
                "type": "update",
                "t_us": now,
                "node": node.id,
                "reason": task.reason,
                "enqueued_us": task.enqueued_at,
                "rows": task.rows,
                "inferences": events,
                "duration_ms": (task.completes_at - task.enqueued_at) / 1000,
            }
        )
        if task.followup:
            self.enqueue_update(node, task.reason, now)
        return task

    def drop_node(self, node_id: str) -> None:
        self.in_flight.pop(node_id, None)
