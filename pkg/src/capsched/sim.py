"""Deterministic discrete-event simulation of one scheduling policy over a trace."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping


from .capacity import CapacityEngine
from .cluster import Cluster
from .config import ScenarioConfig
from .forest import ForestParams
from .metrics import WindowAccumulator, build_report, normalize_density
from .model import FunctionSpec, validate_spec
from .oracle import ContentionOracle, GroundTruthRanges, build_specs, sample_ground_truth, stream
from .predictor import (
    ForestModel,
    ForestPredictor,
    InferenceCostModel,
    PerfectPredictor,
    PredictabilityMonitor,
    Verdict,
    _Memo,
    assemble_features,
    incremental_update,
)
from .scaling import Autoscaler
from .scheduler import CapacityScheduler, GsightScheduler, KubeScheduler
from .traces import BurstyParams, TraceSignal, alternating, bursty_replicated, poisson, timer
from .training import SamplingParams, train_pipeline

# same-timestamp ordering: refreshes land first, then load (so a rise at the exact
# deadline cancels a release or eviction), then timers, then scoring
PRIO_UPDATE, PRIO_LOAD, PRIO_TIMER, PRIO_TICK = 0, 1, 2, 3


@dataclass
class World:
    oracle: ContentionOracle
    specs: dict[str, FunctionSpec]

    def registry(self) -> list[dict]:
        out = []
        for fid, s in sorted(self.specs.items()):
            t = self.oracle.truths[fid]
            out.append(
                {
                    "id": fid,
                    "solo_latency_ms": s.solo_latency_ms,
                    "saturated_load_rps": s.saturated_load_rps,
                    "qos_multiplier": s.qos_multiplier,
                    "configured_resources": list(s.configured_resources),
                    "max_capacity_bound": s.max_capacity_bound,
                    "profile": list(s.profile.features),
                    "demand": list(t.demand),
                    "sensitivity": list(t.sensitivity),
                }
            )
        return out


def build_world(cfg: ScenarioConfig) -> World:
    """Ground truth and function specs; a function of the oracle and function settings only."""
    params = cfg.oracle
    fc = cfg.functions
    truths = sample_ground_truth(fc.count, params, stream(params.seed, "functions"), GroundTruthRanges())
    oracle = ContentionOracle(params, truths)
    lrng = stream(params.seed, "saturated-load")
    loads = {f: round(float(lrng.uniform(*fc.saturated_load_rps)), 3) for f in sorted(truths)}
    specs = build_specs(
        oracle,
        stream(params.seed, "profiling"),
        loads,
        configured_resources=fc.configured_resources,
        qos_multiplier=fc.qos_multiplier,
        max_capacity_bound=fc.max_capacity_bound,
    )
    for fid, spec in specs.items():
        validate_spec(spec, oracle.demand_in_units(fid, cfg.cluster.node_capacity))
    return World(oracle, specs)


def build_trace(cfg: ScenarioConfig, world: World) -> TraceSignal:
    tc = cfg.trace
    loads = {f: s.saturated_load_rps for f, s in world.specs.items()}
    if tc.kind == "file":
        trace = TraceSignal.from_jsonl(tc.path)
        unknown = set(trace.functions) - set(world.specs)
        if unknown:
            raise ValueError(f"trace references unknown functions {sorted(unknown)}")
        return trace
    if tc.kind in ("timer", "alternating") and tc.function not in world.specs:
        raise ValueError(f"trace.function {tc.function!r} is not registered")
    if tc.kind == "timer":
        return timer(tc.function, loads[tc.function], tc.lo, tc.hi, tc.period_s, tc.horizon_s)
    if tc.kind == "alternating":
        return alternating(tc.function, loads[tc.function], tc.half_period_s, tc.horizon_s, cfg.scaling.keep_alive_s)
    if tc.kind == "poisson":
        return poisson({f: tc.rate_rps for f in loads}, tc.window_s, tc.horizon_s, cfg.seed)
    params = BurstyParams(horizon_s=tc.horizon_s, step_s=tc.step_s, target_share=tc.target_share)
    return bursty_replicated(loads, cfg.seed, params)


def cost_model(cfg: ScenarioConfig) -> InferenceCostModel:
    return InferenceCostModel(cfg.predictor.c0_ms, cfg.predictor.c1_ms_per_row)


def forest_params(cfg: ScenarioConfig) -> ForestParams:
    p = cfg.predictor
    return ForestParams(n_trees=p.n_trees, max_depth=p.max_depth, min_leaf=p.min_leaf, seed=cfg.seed)


def train_model(cfg: ScenarioConfig, world: World):
    """Train on oracle-labelled colocations; returns the pipeline result with its accuracy report."""
    sampling = SamplingParams(n_samples=cfg.predictor.n_samples)
    return train_pipeline(world.specs, world.oracle, cfg.seed, sampling, forest_params(cfg))


def load_or_train(cfg: ScenarioConfig, world: World) -> ForestModel:
    if cfg.predictor.model_path:
        model = ForestModel.load(cfg.predictor.model_path)
        if model.width != 3 * cfg.oracle.profile_width + 5:
            raise ValueError("model feature width does not match the oracle profile width")
        return model
    return train_model(cfg, world).model


class Simulation:
    def __init__(
        self,
        cfg: ScenarioConfig,
        world: World,
        trace: TraceSignal,
        model: ForestModel | None = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.world = world
        self.trace = trace
        self.specs = world.specs
        self.oracle = world.oracle
        self.events: list[dict] = []
        self.heap: list[tuple] = []
        self._seq = 0
        self.now = 0
        self.window_us = int(round(cfg.eval_window_s * 1_000_000))
        self.keep_alive_us = int(round(cfg.scaling.keep_alive_s * 1_000_000))
        self.empty_since: dict[str, int] = {}
        self.acc = WindowAccumulator()

        self.cluster = Cluster(self.specs, cfg.cluster.node_capacity, log=self.record)
        self.predictor = None
        self.engine = None
        self.monitor = None
        policy = cfg.policy
        lookup = cfg.scheduler.lookup_ms
        if policy in ("capsched", "gsight"):
            if cfg.predictor.kind == "perfect":
                self.predictor = PerfectPredictor(self.oracle, cost_model(cfg))
            else:
                if model is None:
                    model = load_or_train(cfg, world)
                self.predictor = ForestPredictor(model, self.specs, cost_model(cfg))
        if policy == "capsched":
            self.engine = CapacityEngine(self.predictor, self.specs, self._post_update, log=self.record)
            if cfg.monitor.enabled and isinstance(self.predictor, ForestPredictor):
                m = cfg.monitor
                self.monitor = PredictabilityMonitor(m.error_threshold, m.consecutive_bad_limit, m.retrain_limit)
            self.scheduler = CapacityScheduler(
                self.cluster, self.engine, self.predictor, lookup, self.monitor, log=self.record,
                probe_batch=cfg.scheduler.probe_batch,
            )
        elif policy == "gsight":
            self.scheduler = GsightScheduler(self.cluster, self.predictor, log=self.record)
        else:
            self.scheduler = KubeScheduler(self.cluster, lookup, log=self.record)
        self.autoscaler = Autoscaler(self.cluster, self.scheduler, cfg.scaling, self._post_timer, log=self.record)
        self.monitor_rng = stream(cfg.seed, "monitor")
        self.monitor_samples: dict[str, list] = {}
        self.retrains = 0
        self.check_every = max(1, int(round(cfg.monitor.check_every_s / cfg.eval_window_s)))

    # event plumbing

    def record(self, rec: dict) -> None:
        self.events.append(rec)

    def _push(self, t: int, prio: int, kind: str, payload: tuple) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (t, prio, self._seq, kind, payload))

    def _post_update(self, t: int, node_id: str) -> None:
        self._push(t, PRIO_UPDATE, "update", (node_id,))

    def _post_timer(self, t: int, kind: str, key: str, token: int) -> None:
        self._push(t, PRIO_TIMER, "timer", (kind, key, token))

    # main loop

    def run(self) -> dict:
        horizon = self.trace.horizon_ms * 1000
        for t_ms, fid, rps in self.trace.changes():
            self._push(t_ms * 1000, PRIO_LOAD, "load", (fid, rps))
        t = 0
        while t < horizon:
            self._push(t, PRIO_TICK, "tick", ())
            t += self.window_us
        while self.heap and self.heap[0][0] < horizon:
            t, _, _, kind, payload = heapq.heappop(self.heap)
            self.now = t
            self.dispatch(kind, payload, t)
            self._track_empty(t)
        return self.report()

    def dispatch(self, kind: str, payload: tuple, now: int) -> None:
        if kind == "load":
            self.autoscaler.on_load_change(payload[0], payload[1], now)
        elif kind == "update":
            node = self.cluster.nodes.get(payload[0])
            task = self.engine.apply_update_completion(node, now)
            if task is not None:
                self.autoscaler.migrate_stranded(node, now)
        elif kind == "timer":
            tkind, key, token = payload
            if tkind == "scale_in":
                self._scale_in(key, token, now)
            else:
                self.autoscaler.on_timer(tkind, key, token, now)
        elif kind == "tick":
            self.tick(now)
        else:
            raise ValueError(f"unknown event {kind!r}")

    def _track_empty(self, now: int) -> None:
        for nid, node in self.cluster.nodes.items():
            if node.empty:
                if nid not in self.empty_since:
                    self.empty_since[nid] = now
                    self._post_timer(now + self.keep_alive_us, "scale_in", nid, now)
            else:
                self.empty_since.pop(nid, None)

    def _scale_in(self, node_id: str, token: int, now: int) -> None:
        node = self.cluster.nodes.get(node_id)
        if node is None or not node.empty or self.empty_since.get(node_id) != token:
            return
        self.scheduler.scale_in(node_id, now)
        del self.empty_since[node_id]
        if self.engine is not None:
            self.engine.drop_node(node_id)

    def tick(self, now: int) -> None:
        rps = {f: r for f, r in sorted(self.autoscaler.rps.items()) if r > 0}
        rosters = {nid: dict(sorted(n.roster.items())) for nid, n in sorted(self.cluster.nodes.items())}
        self.record({"type": "tick", "t_us": now, "rps": rps})
        self.acc.add_window(rosters, rps, self.specs, self.oracle, self.cfg.eval_window_s)
        if self.monitor is not None and (now // self.window_us) % self.check_every == 0:
            self.check_predictability(rosters, now)

    def check_predictability(self, rosters, now: int) -> None:
        """Compare the model with a monitored latency for every running function."""
        model = self.predictor.model
        for fid in sorted(self.specs):
            if self.monitor.in_fallback(fid):
                continue
            nid = next((n for n, r in rosters.items() if fid in r and r[fid].saturated > 0), None)
            if nid is None:
                continue
            row = assemble_features(fid, rosters[nid], self.specs, model.gamma_feat)
            predicted = float(model.predict_latency(row)[0])
            observed = self.oracle.observe_sample(fid, rosters[nid], self.monitor_rng)
            self.monitor_samples.setdefault(fid, []).append((row, observed))
            verdict = self.monitor.record_observation(fid, max(predicted, 1e-9), observed)
            if verdict is Verdict.RETRAIN:
                samples = self.monitor_samples.pop(fid)
                self.predictor.model = incremental_update(model, samples)
                self.predictor._memo = _Memo()
                model = self.predictor.model
                self.retrains += 1
                self.record({"type": "monitor", "t_us": now, "function": fid, "verdict": "Retrain"})
            elif verdict is Verdict.FALLBACK:
                self.record({"type": "monitor", "t_us": now, "function": fid, "verdict": "Fallback"})

    def report(self) -> dict:
        s = self.autoscaler.stats
        monitor = None
        if self.monitor is not None:
            monitor = {
                "retrains": self.retrains,
                "fallback": sorted(f for f in self.specs if self.monitor.in_fallback(f)),
            }
        return build_report(
            self.cfg.policy,
            self.acc,
            s,
            async_inferences=self.engine.async_inferences if self.engine else 0,
            async_cost_ms=self.engine.async_cost_ms if self.engine else 0.0,
            update_tasks=self.engine.tasks_started if self.engine else 0,
            nodes_added=self.cluster.nodes_added,
            nodes_removed=self.cluster.nodes_removed,
            monitor=monitor,
        )


@dataclass
class RunResult:
    report: dict
    events: list[dict] = field(repr=False)
    trace: TraceSignal = field(repr=False)
    world: World = field(repr=False)


def simulate(cfg: ScenarioConfig, world: World | None = None, trace: TraceSignal | None = None,
             model: ForestModel | None = None) -> RunResult:
    world = world or build_world(cfg)
    trace = trace or build_trace(cfg, world)
    sim = Simulation(cfg, world, trace, model)
    report = sim.run()
    return RunResult(report, sim.events, trace, world)


def run_scenario(cfg: ScenarioConfig, model: ForestModel | None = None, world: World | None = None,
                 trace: TraceSignal | None = None) -> RunResult:
    """One policy run plus a paired kube run on the same trace for density normalization."""
    cfg.validate()
    world = world or build_world(cfg)
    trace = trace or build_trace(cfg, world)
    res = simulate(cfg, world, trace, model)
    if cfg.policy == "kube":
        baseline = res.report["density"]
    else:
        baseline = simulate(replace(cfg, policy="kube"), world, trace).report["density"]
    normalize_density(res.report, baseline)
    res.report["baseline_density"] = baseline
    res.report["config"] = cfg.to_dict()
    res.report["functions"] = world.registry()
    res.report["trace"] = {"functions": trace.functions, "horizon_ms": trace.horizon_ms}
    return res


def compare(cfg: ScenarioConfig, model: ForestModel | None = None) -> dict[str, RunResult]:
    """All three policies on the identical trace, seed and model."""
    cfg.validate()
    world = build_world(cfg)
    trace = build_trace(cfg, world)
    if cfg.predictor.kind == "forest" and model is None:
        model = load_or_train(cfg, world)
    runs = {}
    for policy in ("kube", "gsight", "capsched"):
        runs[policy] = simulate(replace(cfg, policy=policy), world, trace, model)
    base = runs["kube"].report["density"]
    for policy, r in runs.items():
        normalize_density(r.report, base)
        r.report["baseline_density"] = base
        r.report["config"] = replace(cfg, policy=policy).to_dict()
        r.report["functions"] = world.registry()
    return runs


def ratio_table(runs: Mapping[str, RunResult]) -> dict:
    cap = runs["capsched"].report
    gs = runs["gsight"].report

    def ratio(a, b):
        return a / b if b else None

    return {
        "schedule_cost_ratio_gsight_over_capsched": ratio(gs["schedule_ms_mean"], cap["schedule_ms_mean"]),
        "inference_per_schedule_capsched_over_gsight": ratio(cap["inference_per_schedule"], gs["inference_per_schedule"]),
        "inference_reduction": 1 - ratio(cap["inference_per_schedule"], gs["inference_per_schedule"])
        if gs["inference_per_schedule"] else None,
        "density_capsched": cap["normalized_density"],
        "density_gsight": gs["normalized_density"],
        "cold_start_e2e_reduction_vs_gsight": 1 - ratio(cap["cold_starts"]["e2e_ms_mean"], gs["cold_starts"]["e2e_ms_mean"])
        if gs["cold_starts"]["e2e_ms_mean"] else None,
        "cold_starts": {p: r.report["cold_starts"] for p, r in runs.items()},
        "qos_violation_rate": {p: r.report["qos_violation_rate"] for p, r in runs.items()},
    }


def write_events(events: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")


def read_events(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
