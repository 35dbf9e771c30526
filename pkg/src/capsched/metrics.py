"""QoS and density accounting, report assembly and event-log replay."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .model import ConcurrencyInfo, FunctionSpec, qos_threshold
from .oracle import ContentionOracle

Roster = Mapping[str, ConcurrencyInfo]


@dataclass
class FunctionWindowStats:
    request_mass: float = 0.0
    violation_mass: float = 0.0
    unservable_mass: float = 0.0


@dataclass
class WindowAccumulator:
    """Sums over evaluation windows; the report is a pure function of these."""

    windows: int = 0
    request_mass: float = 0.0
    violation_mass: float = 0.0
    unservable_mass: float = 0.0
    instance_ticks: int = 0
    active_node_ticks: int = 0
    per_function: dict[str, FunctionWindowStats] = field(default_factory=dict)

    def add_window(
        self,
        rosters: Mapping[str, Roster],
        rps: Mapping[str, float],
        specs: Mapping[str, FunctionSpec],
        oracle: ContentionOracle,
        window_s: float,
    ) -> None:
        """Score one window: each node's saturated share of the load is checked against oracle truth."""
        self.windows += 1
        node_ids = sorted(rosters)
        sat_total: dict[str, int] = {}
        for nid in node_ids:
            for fid, info in rosters[nid].items():
                sat_total[fid] = sat_total.get(fid, 0) + info.saturated
        for fid in sorted(set(rps) | set(sat_total)):
            load = rps.get(fid, 0.0)
            if load <= 0:
                continue
            st = self.per_function.setdefault(fid, FunctionWindowStats())
            mass = load * window_s
            st.request_mass += mass
            self.request_mass += mass
            n_sat = sat_total.get(fid, 0)
            if n_sat == 0:
                # nothing can serve the load; counted as violating
                st.unservable_mass += mass
                st.violation_mass += mass
                self.unservable_mass += mass
                self.violation_mass += mass
                continue
            thr = qos_threshold(specs[fid])
            for nid in node_ids:
                info = rosters[nid].get(fid)
                if info is None or info.saturated == 0:
                    continue
                if oracle.true_latency(fid, rosters[nid]) > thr:
                    v = mass * info.saturated / n_sat
                    st.violation_mass += v
                    self.violation_mass += v
        live = [sum(i.total for i in r.values()) for r in rosters.values()]
        self.instance_ticks += sum(live)
        self.active_node_ticks += sum(1 for n in live if n > 0)

    @property
    def violation_rate(self) -> float:
        return self.violation_mass / self.request_mass if self.request_mass else 0.0

    @property
    def density(self) -> float | None:
        if self.active_node_ticks == 0:
            return None
        return self.instance_ticks / self.active_node_ticks


def _pct(xs, q) -> float:
    return float(np.percentile(xs, q)) if len(xs) else 0.0


def build_report(
    policy: str,
    acc: WindowAccumulator,
    stats,
    async_inferences: int = 0,
    async_cost_ms: float = 0.0,
    update_tasks: int = 0,
    nodes_added: int = 0,
    nodes_removed: int = 0,
    monitor: dict | None = None,
) -> dict:
    ms = stats.schedule_ms
    n = len(ms)
    placements = stats.placements
    slow = [k for p, k, _ in placements if p == "Slow"]
    fast_placements = sum(1 for p, _, _ in placements if p == "Fast")
    # the first schedule of each function cannot hit a table entry
    first_n = sum(k for _, k, first in placements if first)
    later_slow = sum(k for p, k, first in placements if p == "Slow" and not first)
    reacts = stats.reactivations
    per_fn = {fid: asdict(s) for fid, s in sorted(acc.per_function.items())}
    for fid, d in per_fn.items():
        d["violation_rate"] = d["violation_mass"] / d["request_mass"] if d["request_mass"] else 0.0
    return {
        "policy": policy,
        "windows": acc.windows,
        "qos_violation_rate": acc.violation_rate,
        "request_mass": acc.request_mass,
        "violation_mass": acc.violation_mass,
        "unservable_mass": acc.unservable_mass,
        "density": acc.density,
        "schedules": n,
        "schedule_ms_mean": float(np.mean(ms)) if n else 0.0,
        "schedule_ms_p50": _pct(ms, 50),
        "schedule_ms_p99": _pct(ms, 99),
        "schedule_wait_ms_mean": float(np.mean(stats.schedule_wait_ms)) if n else 0.0,
        "schedule_wait_ms_p99": _pct(stats.schedule_wait_ms, 99),
        "placements": len(placements),
        "slow_placements": len(slow),
        # admissions that needed no inference of their own: fast-path placements plus
        # the batch-mates admitted against an entry a slow placement just computed
        "fast_path_fraction": 1 - len(slow) / n if n and policy == "capsched" else 0.0,
        "fast_path_fraction_after_first_contact": (
            1 - later_slow / (n - first_n) if n > first_n and policy == "capsched" else 0.0
        ),
        "fast_path_fraction_placements": fast_placements / len(placements) if placements else 0.0,
        "instances_in_slow_placements": sum(slow),
        "inference_events_critical": stats.schedule_inferences,
        "inference_per_schedule": stats.schedule_inferences / n if n else 0.0,
        "inference_events_async": async_inferences,
        "inference_events_background": stats.background_inferences,
        "inference_events_total": stats.schedule_inferences + async_inferences + stats.background_inferences,
        "async_update_tasks": update_tasks,
        "async_cost_ms": async_cost_ms,
        "cold_starts": {
            "real": stats.real_cold_starts,
            "logical": stats.logical_starts,
            "migrations": stats.migrations,
            "migration_failures": stats.migration_failures,
            "reactivations": reacts,
            "reactivation_real": stats.reactivation_cold_starts,
            "logical_fraction_of_reactivations": (reacts - stats.reactivation_cold_starts) / reacts if reacts else 1.0,
            "e2e_ms_mean": float(np.mean(stats.cold_start_e2e_ms)) if stats.cold_start_e2e_ms else 0.0,
            "e2e_wait_ms_mean": float(np.mean(stats.cold_start_wait_e2e_ms)) if stats.cold_start_wait_e2e_ms else 0.0,
            "background_ms": stats.background_ms,
        },
        "releases": stats.releases,
        "evictions": stats.evictions,
        "scale_outs": stats.scale_outs,
        "nodes_added": nodes_added,
        "nodes_removed": nodes_removed,
        "monitor": monitor or {},
        "per_function": per_fn,
    }


def normalize_density(report: dict, baseline_density: float | None) -> None:
    d = report["density"]
    if d is None or not baseline_density:
        report["normalized_density"] = 1.0
        report["density_undefined"] = True
    else:
        report["normalized_density"] = d / baseline_density
        report["density_undefined"] = False


def replay(
    events: Iterable[dict],
    specs: Mapping[str, FunctionSpec],
    oracle: ContentionOracle,
    window_s: float,
) -> tuple[WindowAccumulator, list[dict]]:
    """Rebuild rosters from the transition log and re-score every window with the oracle.

    Also returns every admission whose post-admission roster exceeds the
    oracle's true capacity for the admitted function.
    """
    rosters: dict[str, dict[str, list[int]]] = {}
    acc = WindowAccumulator()
    over: list[dict] = []

    def frozen(nid):
        return {f: ConcurrencyInfo(s, c) for f, (s, c) in sorted(rosters[nid].items()) if s or c}

    for ev in events:
        kind = ev["type"]
        if kind == "node_add":
            rosters[ev["node"]] = {}
        elif kind == "node_remove":
            rosters.pop(ev["node"])
        elif kind == "transition":
            slot = rosters[ev["node"]].setdefault(ev["function"], [0, 0])
            src, dst = ev["from"], ev["to"]
            if src == "Saturated":
                slot[0] -= 1
            elif src == "Cached":
                slot[1] -= 1
            if dst == "Saturated":
                slot[0] += 1
            elif dst == "Cached":
                slot[1] += 1
            if slot == [0, 0]:
                del rosters[ev["node"]][ev["function"]]
        elif kind == "schedule":
            roster = frozen(ev["node"])
            fid = ev["function"]
            true_cap = oracle.brute_force_capacity(fid, roster, specs)
            if roster[fid].saturated > true_cap:
                over.append({"t_us": ev["t_us"], "node": ev["node"], "function": fid,
                             "saturated": roster[fid].saturated, "true_capacity": true_cap})
        elif kind == "tick":
            acc.add_window({nid: frozen(nid) for nid in rosters}, ev["rps"], specs, oracle, window_s)
    return acc, over
