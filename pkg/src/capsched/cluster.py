"""Mutable cluster state: nodes, instance records and the transition audit trail."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

from .model import (
    ConcurrencyInfo,
    FunctionSpec,
    InstanceRecord,
    InstanceState,
    NodeState,
    ResourceVector,
)

S = InstanceState


class Cluster:
    def __init__(
        self,
        specs: Mapping[str, FunctionSpec],
        node_capacity: ResourceVector,
        log: Callable[[dict], None] | None = None,
    ):
        self.specs = specs
        self.node_capacity = tuple(node_capacity)
        self.nodes: dict[str, NodeState] = {}
        self.instances: dict[str, InstanceRecord] = {}
        self.pools: dict[str, str] = {}  # node id -> "dense" | "conservative"
        self.log = log or (lambda rec: None)
        self._node_seq = 0
        self._inst_seq = 0
        self.nodes_added = 0
        self.nodes_removed = 0

    # nodes

    def add_node(self, now: int, pool: str = "dense") -> NodeState:
        self._node_seq += 1
        node = NodeState(id=f"node-{self._node_seq:04d}", capacity=self.node_capacity, created_at=now)
        self.nodes[node.id] = node
        self.pools[node.id] = pool
        self.nodes_added += 1
        self.log({"type": "node_add", "t_us": now, "node": node.id, "pool": pool})
        return node

    def remove_node(self, node_id: str, now: int) -> None:
        node = self.nodes[node_id]
        if not node.empty:
            raise ValueError(f"cannot scale in non-empty node {node_id}")
        del self.nodes[node_id]
        del self.pools[node_id]
        self.nodes_removed += 1
        self.log({"type": "node_remove", "t_us": now, "node": node_id})

    def pool_nodes(self, pool: str) -> list[NodeState]:
        return [n for nid, n in self.nodes.items() if self.pools[nid] == pool]

    # instances

    def create_instance(self, function_id: str, node: NodeState, now: int, cause: str) -> InstanceRecord:
        self._inst_seq += 1
        rec = InstanceRecord(
            id=f"i{self._inst_seq:07d}",
            function_id=function_id,
            node_id=node.id,
            state=S.SATURATED,
            state_since=now,
        )
        self.instances[rec.id] = rec
        node.adjust(function_id, d_saturated=1)
        self.log(
            {
                "type": "transition",
                "t_us": now,
                "instance": rec.id,
                "function": function_id,
                "node": node.id,
                "from": None,
                "to": S.SATURATED.value,
                "cause": cause,
            }
        )
        return rec

    def transition(self, rec: InstanceRecord, new_state: InstanceState, now: int, cause: str) -> None:
        old = rec.state
        rec.transition(new_state, now)
        node = self.nodes[rec.node_id]
        if old is S.SATURATED and new_state is S.CACHED:
            node.adjust(rec.function_id, d_saturated=-1, d_cached=1)
        elif old is S.CACHED and new_state is S.SATURATED:
            node.adjust(rec.function_id, d_saturated=1, d_cached=-1)
        elif old is S.CACHED and new_state is S.EVICTED:
            node.adjust(rec.function_id, d_cached=-1)
            del self.instances[rec.id]
            if rec.function_id not in node.roster:
                node.capacity_table.pop(rec.function_id, None)
                node.pending.pop(rec.function_id, None)
                node.full_for.discard(rec.function_id)
        self.log(
            {
                "type": "transition",
                "t_us": now,
                "instance": rec.id,
                "function": rec.function_id,
                "node": rec.node_id,
                "from": old.value,
                "to": new_state.value,
                "cause": cause,
            }
        )

    def live(self, function_id: str, state: InstanceState | None = None) -> list[InstanceRecord]:
        return [
            r
            for r in self.instances.values()
            if r.function_id == function_id and (state is None or r.state is state)
        ]

    def on_node(self, node_id: str, function_id: str, state: InstanceState) -> list[InstanceRecord]:
        return sorted(
            (
                r
                for r in self.instances.values()
                if r.node_id == node_id and r.function_id == function_id and r.state is state
            ),
            key=lambda r: r.id,
        )

    def saturated_total(self, function_id: str) -> int:
        return sum(n.concurrency(function_id).saturated for n in self.nodes.values())

    def cached_total(self, function_id: str) -> int:
        return sum(n.concurrency(function_id).cached for n in self.nodes.values())

    def audit(self) -> None:
        """Roster counts must equal the instance records in matching states."""
        counts: dict[tuple[str, str], list[int]] = {}
        for r in self.instances.values():
            c = counts.setdefault((r.node_id, r.function_id), [0, 0])
            c[0 if r.state is S.SATURATED else 1] += 1
        for node in self.nodes.values():
            for fid, info in node.roster.items():
                got = counts.pop((node.id, fid), [0, 0])
                if [info.saturated, info.cached] != got:
                    raise AssertionError(f"{node.id}/{fid}: roster {info} vs records {got}")
        if any(v != [0, 0] for v in counts.values()):
            raise AssertionError(f"records on unknown roster slots: {counts}")


def roster_of(entries: Iterable[tuple[str, int, int]]) -> dict[str, ConcurrencyInfo]:
    return {f: ConcurrencyInfo(s, c) for f, s, c in entries}
