"""Placement policies.

``CapacityScheduler`` admits batches against per-node capacity tables (fast
path) and computes a missing or invalidated entry synchronously (slow path).
``KubeScheduler`` spreads instances by configured resources with no
overcommitment; ``GsightScheduler`` runs one batched validation inference per
instance on the critical path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

from .capacity import CapacityEngine, compute_capacity, install_entry, plan_scan, resolve_scan
from .cluster import Cluster
from .model import ConcurrencyInfo, FunctionSpec, InstanceRecord, NodeState, qos_threshold
from .predictor import Predictor, PredictabilityMonitor


class NoFeasibleNode(RuntimeError):
    pass


class InfeasibleFunction(RuntimeError):
    """The function cannot meet its QoS even alone on an empty node."""


@dataclass
class Placement:
    node_id: str
    admitted: int
    path: str
    critical_path_ms: float
    inference_events: int


@dataclass
class ScheduleOutcome:
    function_id: str
    requested: int
    placements: list[Placement] = field(default_factory=list)
    # (instance, per-instance critical path ms, path)
    instances: list[tuple[InstanceRecord, float, str]] = field(default_factory=list)
    inference_events: int = 0
    scale_outs: int = 0
    # total decision time of the call(s), including lookups and inferences that admitted nothing
    cost_ms: float = 0.0

    @property
    def admitted(self) -> int:
        return sum(p.admitted for p in self.placements)

    @property
    def remainder(self) -> int:
        return self.requested - self.admitted

    @property
    def amortized_ms(self) -> float:
        """Decision time shared evenly by the admitted instances."""
        return self.cost_ms / self.admitted if self.admitted else 0.0


class BaseScheduler:
    name = "base"
    pool = "dense"
    # where requests go when the model rejects even an empty node
    fallback: "BaseScheduler | None" = None

    def __init__(self, cluster: Cluster, log: Callable[[dict], None] | None = None):
        self.cluster = cluster
        self.specs: Mapping[str, FunctionSpec] = cluster.specs
        self.log = log or (lambda rec: None)

    def nodes(self) -> list[NodeState]:
        return self.cluster.pool_nodes(self.pool)

    def scale_out(self, now: int) -> NodeState:
        return self.cluster.add_node(now, pool=self.pool)

    def scale_in(self, node_id: str, now: int) -> None:
        self.cluster.remove_node(node_id, now)

    def _admit(
        self,
        out: ScheduleOutcome,
        node: NodeState,
        k: int,
        path: str,
        critical_ms: float,
        inferences: int,
        now: int,
    ) -> None:
        fid = out.function_id
        for _ in range(k):
            rec = self.cluster.create_instance(fid, node, now, cause="schedule")
            out.instances.append((rec, critical_ms, path))
        out.placements.append(Placement(node.id, k, path, critical_ms, inferences))
        self.log(
            {
                "type": "schedule",
                "t_us": now,
                "function": fid,
                "count": k,
                "node": node.id,
                "path": path,
                "critical_path_ms": critical_ms,
                "inference_events": inferences,
                "policy": self.name,
            }
        )

    def schedule(self, function_id: str, count: int, now: int, base_ms: float = 0.0) -> ScheduleOutcome:
        raise NotImplementedError

    def place(self, function_id: str, count: int, now: int) -> ScheduleOutcome:
        """Schedule ``count`` instances, scaling the cluster out once per unsatisfied pass."""
        if count <= 0:
            raise ValueError("count must be positive")
        out = self.schedule(function_id, count, now)
        while out.remainder > 0:
            self.scale_out(now)
            out.scale_outs += 1
            more = self.schedule(function_id, out.remainder, now, base_ms=out.cost_ms)
            if more.admitted == 0:
                if self.fallback is None:
                    raise InfeasibleFunction(f"{function_id} does not fit on an empty node")
                self.log({"type": "fallback", "t_us": now, "function": function_id, "count": out.remainder})
                wasted = more.cost_ms
                more = self.fallback.place(function_id, out.remainder, now)
                more.cost_ms += wasted
            out.placements += more.placements
            out.instances += more.instances
            out.inference_events += more.inference_events
            out.scale_outs += more.scale_outs
            out.cost_ms += more.cost_ms
        return out


class KubeScheduler(BaseScheduler):
    """Least-allocated spreading on configured resources; never overcommits."""

    name = "kube"

    def __init__(self, cluster: Cluster, lookup_ms: float = 0.5, pool: str = "dense", log=None):
        super().__init__(cluster, log)
        self.lookup_ms = lookup_ms
        self.pool = pool

    def fits(self, node: NodeState, function_id: str) -> bool:
        conf = self.specs[function_id].configured_resources
        alloc = node.allocated(self.specs)
        return all(a + c <= cap + 1e-9 for a, c, cap in zip(alloc, conf, node.capacity))

    def pick(self, function_id: str) -> NodeState | None:
        best = None
        best_key = None
        for node in self.nodes():
            if not self.fits(node, function_id):
                continue
            key = (-node.free_configured(self.specs), node.id)
            if best_key is None or key < best_key:
                best, best_key = node, key
        return best

    def schedule(self, function_id: str, count: int, now: int, base_ms: float = 0.0) -> ScheduleOutcome:
        out = ScheduleOutcome(function_id, count)
        for _ in range(count):
            node = self.pick(function_id)
            if node is None:
                break
            self._admit(out, node, 1, "Kube", base_ms + self.lookup_ms, 0, now)
            out.cost_ms += self.lookup_ms
        return out


class GsightScheduler(BaseScheduler):
    """Per-instance QoS validation with one inference on the critical path each time."""

    name = "gsight"

    def __init__(self, cluster: Cluster, predictor: Predictor, log=None):
        super().__init__(cluster, log)
        self.predictor = predictor
        self.fallback = KubeScheduler(cluster, pool="conservative", log=log)

    def validation_queries(self, roster: Mapping[str, ConcurrencyInfo], function_id: str):
        trial = dict(roster)
        cur = trial.get(function_id, ConcurrencyInfo())
        trial[function_id] = ConcurrencyInfo(cur.saturated + 1, cur.cached)
        queries = [(function_id, trial)]
        queries += [(g, trial) for g in sorted(trial) if g != function_id and trial[g].saturated > 0]
        return queries

    def schedule(self, function_id: str, count: int, now: int, base_ms: float = 0.0) -> ScheduleOutcome:
        out = ScheduleOutcome(function_id, count)
        for _ in range(count):
            nodes = self.nodes()
            queries, owners = [], []
            for node in nodes:
                qs = self.validation_queries(node.roster, function_id)
                queries += qs
                owners += [node.id] * len(qs)
            fresh = self.validation_queries({}, function_id)
            queries += fresh
            owners += [None] * len(fresh)
            res = self.predictor.predict(queries)
            out.inference_events += res.inference_events
            ok: dict[str | None, bool] = {}
            for (fid, _), owner, p in zip(queries, owners, res.predictions):
                ok[owner] = ok.get(owner, True) and p <= qos_threshold(self.specs[fid])
            feasible = [n for n in nodes if ok.get(n.id)]
            ms = base_ms + res.cost_ms
            out.cost_ms += res.cost_ms
            if feasible:
                node = min(feasible, key=lambda n: (-n.instance_count, n.id))
            elif ok.get(None):
                node = self.scale_out(now)
                out.scale_outs += 1
            else:
                self.log({"type": "fallback", "t_us": now, "function": function_id, "count": 1})
                node = self.fallback.pick(function_id) or self.fallback.scale_out(now)
                self._admit(out, node, 1, "Kube", ms + self.fallback.lookup_ms, res.inference_events, now)
                continue
            self._admit(out, node, 1, "Gsight", ms, res.inference_events, now)
        return out

    def validate(self, roster: Mapping[str, ConcurrencyInfo], function_id: str) -> tuple[bool, float, int]:
        """Admit-or-reject for one more instance of ``function_id`` on ``roster``."""
        queries = self.validation_queries(roster, function_id)
        res = self.predictor.predict(queries)
        ok = all(p <= qos_threshold(self.specs[f]) for (f, _), p in zip(queries, res.predictions))
        return ok, res.cost_ms, res.inference_events


class CapacityScheduler(BaseScheduler):
    """Capacity-table scheduling with batched admissions."""

    name = "capsched"

    def __init__(
        self,
        cluster: Cluster,
        engine: CapacityEngine,
        predictor: Predictor,
        lookup_ms: float = 0.5,
        monitor: PredictabilityMonitor | None = None,
        log=None,
        probe_batch: int = 4,
    ):
        super().__init__(cluster, log)
        if probe_batch < 1:
            raise ValueError("probe_batch must be positive")
        self.engine = engine
        self.predictor = predictor
        self.lookup_ms = lookup_ms
        self.monitor = monitor
        self.probe_batch = probe_batch
        self.fallback = KubeScheduler(cluster, lookup_ms, pool="conservative", log=log)

    def usable_entry(self, node: NodeState, function_id: str) -> bool:
        """Entry exists and nothing but the function's own admissions happened since it was computed."""
        return function_id in node.capacity_table and not node.grown_since(function_id)

    def node_filter(self, function_id: str) -> list[NodeState]:
        with_entry, without = [], []
        for node in self.nodes():
            h = node.headroom(function_id)
            if h is None:
                without.append(node)
            elif h > 0:
                with_entry.append((h, node))
        with_entry.sort(key=lambda hn: (-hn[0], hn[1].id))
        without.sort(key=lambda n: (-n.free_configured(self.specs), n.id))
        return [n for _, n in with_entry] + without

    def sync_capacity(self, node: NodeState, function_id: str, now: int) -> tuple[int, float, int]:
        res = compute_capacity(node.roster, function_id, self.predictor, self.specs)
        install_entry(node, function_id, res.capacity, now)
        return res.capacity, res.cost_ms, res.inference_events

    def probe(self, nodes: list[NodeState], function_id: str) -> tuple[list[int], float, int]:
        """Capacities of ``function_id`` on several nodes from one batched inference."""
        plans = [plan_scan(n.roster, function_id, self.specs) for n in nodes]
        queries = [q for p in plans for q in p.queries]
        res = self.predictor.predict(queries)
        caps, i = [], 0
        for node, plan in zip(nodes, plans):
            preds = res.predictions[i : i + len(plan.queries)]
            i += len(plan.queries)
            caps.append(resolve_scan(plan, preds, self.specs, node.concurrency(function_id).saturated))
        return caps, res.cost_ms, res.inference_events

    def schedule(self, function_id: str, count: int, now: int, base_ms: float = 0.0) -> ScheduleOutcome:
        if count <= 0:
            raise ValueError("count must be positive")
        if self.monitor is not None and self.monitor.in_fallback(function_id):
            return self.fallback.schedule(function_id, count, now, base_ms)
        out = ScheduleOutcome(function_id, count)
        remaining = count
        ms = base_ms
        ranked = self.node_filter(function_id)
        fresh = [n for n in ranked if function_id not in n.capacity_table]
        probed: dict[str, int] = {}
        for node in ranked:
            if remaining == 0:
                break
            if self.usable_entry(node, function_id):
                headroom = node.headroom(function_id)
                if headroom <= 0:
                    continue
                ms += self.lookup_ms
                path, inferences, reason = "Fast", 0, "Admit"
            elif function_id in node.capacity_table:
                # entry invalidated by a neighbor's growth: recompute this node alone
                cap, cost, inferences = self.sync_capacity(node, function_id, now)
                ms += cost
                out.inference_events += inferences
                headroom = cap - node.concurrency(function_id).saturated
                path, reason = "Slow", "Admit"
                if headroom <= 0:
                    continue
            else:
                if node.id not in probed:
                    start = fresh.index(node)
                    chunk = fresh[start : start + self.probe_batch]
                    caps, cost, inferences = self.probe(chunk, function_id)
                    probed.update((n.id, c) for n, c in zip(chunk, caps))
                    ms += cost
                    out.inference_events += inferences
                else:
                    inferences = 0
                cap = probed[node.id]
                headroom = cap - node.concurrency(function_id).saturated
                path, reason = "Slow", "NewFunction"
                if headroom <= 0:
                    continue
                install_entry(node, function_id, cap, now)
            k = min(remaining, headroom)
            self._admit(out, node, k, path, ms, inferences, now)
            node.pending[function_id] = node.pending.get(function_id, 0) + k
            self.engine.enqueue_update(node, reason, now)
            remaining -= k
        out.cost_ms = ms - base_ms
        return out

    def place(self, function_id: str, count: int, now: int) -> ScheduleOutcome:
        if self.monitor is not None and self.monitor.in_fallback(function_id):
            return self.fallback.place(function_id, count, now)
        return super().place(function_id, count, now)

    def migration_target(
        self, function_id: str, exclude: str, now: int, allow_scale_out: bool = False
    ) -> tuple[NodeState | None, float, int]:
        """A node that can hold one more cached instance and still re-activate all of them."""
        cost = 0.0
        inferences = 0
        candidates = self.node_filter(function_id)
        for node in candidates:
            if node.id == exclude:
                continue
            cached = node.concurrency(function_id).cached
            if self.usable_entry(node, function_id):
                room = node.headroom(function_id) - cached
            else:
                cap, c, i = self.sync_capacity(node, function_id, now)
                cost += c
                inferences += i
                room = cap - node.concurrency(function_id).saturated - cached
            if room >= 1:
                return node, cost, inferences
        if allow_scale_out:
            node = self.scale_out(now)
            cap, c, i = self.sync_capacity(node, function_id, now)
            if cap >= 1:
                return node, cost + c, inferences + i
            cost, inferences = cost + c, inferences + i
        return None, cost, inferences
