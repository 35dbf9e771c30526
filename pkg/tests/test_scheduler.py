import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsched.capacity import CapacityEngine, compute_capacity, install_entry
from capsched.cluster import Cluster
from capsched.model import InstanceState
from capsched.predictor import PerfectPredictor
from capsched.scheduler import CapacityScheduler, GsightScheduler, InfeasibleFunction, KubeScheduler

from conftest import ci, flat_spec, make_world


def setup(oracle, specs, predictor=None, probe_batch=4):
    log = []
    cluster = Cluster(specs, (48.0, 48.0), log=log.append)
    pred = predictor or PerfectPredictor(oracle)
    posted = []
    engine = CapacityEngine(pred, specs, lambda t, nid: posted.append((t, nid)), log=log.append)
    sched = CapacityScheduler(cluster, engine, pred, log=log.append, probe_batch=probe_batch)
    return cluster, sched, engine, posted, log


def fill(cluster, node, fid, n, now=0):
    for _ in range(n):
        cluster.create_instance(fid, node, now, cause="test")


@pytest.fixture
def exact():
    return make_world(n=4, noise=0.0)


def test_fast_path_two_arrivals_one_update(exact):
    oracle, specs = exact
    cluster, sched, engine, posted, _ = setup(oracle, specs)
    node = cluster.add_node(0)
    fill(cluster, node, "f1", 2)
    fill(cluster, node, "f3", 1)
    cap = compute_capacity(node.roster, "f3", sched.predictor, specs).capacity
    assert cap >= 3
    install_entry(node, "f3", 3, 0)
    out = sched.schedule("f3", 2, 10)
    assert out.admitted == 2 and out.inference_events == 0
    assert [p.path for p in out.placements] == ["Fast"]
    assert out.placements[0].critical_path_ms == pytest.approx(0.5)
    assert len(posted) == 1
    assert node.pending["f3"] == 2 and node.headroom("f3") == 0


def test_first_contact_is_slow(exact):
    oracle, specs = exact
    cluster, sched, *_ = setup(oracle, specs)
    cluster.add_node(0)
    out = sched.schedule("f2", 1, 0)
    assert out.placements[0].path == "Slow"
    assert out.placements[0].critical_path_ms >= sched.predictor.cost_model.c0_ms
    assert out.inference_events == 1


def test_partial_admission_leaves_remainder(exact):
    oracle, specs = exact
    cluster, sched, *_ = setup(oracle, specs)
    node = cluster.add_node(0)
    truth = oracle.brute_force_capacity("f1", {}, specs)
    out = sched.schedule("f1", truth + 3, 0)
    assert out.admitted == truth and out.remainder == 3
    assert node.concurrency("f1").saturated == truth


def test_place_scales_out_once_per_unsatisfied_pass(exact):
    oracle, specs = exact
    cluster, sched, *_ = setup(oracle, specs)
    truth = oracle.brute_force_capacity("f1", {}, specs)
    out = sched.place("f1", 2 * truth + 1, 0)
    assert out.admitted == 2 * truth + 1
    assert out.scale_outs == 3 and len(cluster.nodes) == 3


def test_node_filter_orders_by_headroom_then_fresh(exact):
    oracle, specs = exact
    cluster, sched, *_ = setup(oracle, specs)
    a, b, c, d = (cluster.add_node(0) for _ in range(4))
    for n, cap in ((a, 2), (b, 4), (c, 1)):
        fill(cluster, n, "f1", 1)
        install_entry(n, "f1", cap, 0)
    # zero headroom on c: the fresh node d comes before it
    ranked = sched.node_filter("f1")
    assert [n.id for n in ranked] == [b.id, a.id, d.id]


def test_empty_cluster_filter():
    oracle, specs = make_world(n=2)
    _, sched, *_ = setup(oracle, specs)
    assert sched.node_filter("f1") == []


def test_foreign_growth_forces_sync_recompute(exact):
    oracle, specs = exact
    cluster, sched, *_ = setup(oracle, specs)
    node = cluster.add_node(0)
    fill(cluster, node, "f1", 1)
    install_entry(node, "f1", 5, 0)
    fill(cluster, node, "f2", 2)
    out = sched.schedule("f1", 1, 0)
    assert out.placements[0].path == "Slow" and out.inference_events == 1
    assert not node.grown_since("f1")


def test_chunked_probe_batches_fresh_nodes(exact):
    oracle, specs = exact
    cluster, sched, *_ = setup(oracle, specs, probe_batch=3)
    nodes = [cluster.add_node(0) for _ in range(5)]
    for n in nodes:
        fill(cluster, n, "f2", 8)
    big = oracle.brute_force_capacity("f1", nodes[0].roster, specs)
    out = sched.schedule("f1", 5 * big, 0)
    # five fresh nodes probed in chunks of three -> two inferences
    assert out.inference_events == 2
    assert out.admitted == 5 * big


def test_fallback_when_model_rejects_empty_node():
    # a predictor that says everything violates
    class Hopeless(PerfectPredictor):
        def _compute(self, queries):
            return [1e9 for _ in queries]

    oracle, specs = make_world(n=2, noise=0.0)
    cluster, sched, *_ = setup(oracle, specs, predictor=Hopeless(oracle))
    out = sched.place("f1", 3, 0)
    assert out.admitted == 3
    assert {p.path for p in out.placements} == {"Kube"}
    assert any(cluster.pools[n] == "conservative" for n in cluster.nodes)


def test_no_fallback_raises(exact):
    oracle, specs = exact

    class Hopeless(PerfectPredictor):
        def _compute(self, queries):
            return [1e9 for _ in queries]

    cluster, sched, *_ = setup(oracle, specs, predictor=Hopeless(oracle))
    sched.fallback = None
    with pytest.raises(InfeasibleFunction):
        sched.place("f1", 1, 0)


def test_kube_six_per_node_and_tie_break():
    specs = {"f": flat_spec("f")}
    cluster = Cluster(specs, (48.0, 48.0))
    kube = KubeScheduler(cluster)
    out = kube.place("f", 13, 0)
    assert out.admitted == 13 and len(cluster.nodes) == 3
    counts = sorted(n.instance_count for n in cluster.nodes.values())
    assert max(counts) <= 6
    # ties on free space go to the lowest node id
    cluster2 = Cluster(specs, (48.0, 48.0))
    k2 = KubeScheduler(cluster2)
    a, b = cluster2.add_node(0), cluster2.add_node(0)
    assert k2.pick("f") is a


def test_kube_oversized_function_cannot_place():
    specs = {"f": flat_spec("f")}
    big = specs["f"].__class__("f", 10.0, specs["f"].profile, 1.0, configured_resources=(64.0, 8.0))
    cluster = Cluster({"f": big}, (48.0, 48.0))
    with pytest.raises(InfeasibleFunction):
        KubeScheduler(cluster).place("f", 1, 0)


def test_gsight_k_arrivals_k_inferences(exact):
    oracle, specs = exact
    cluster = Cluster(specs, (48.0, 48.0))
    g = GsightScheduler(cluster, PerfectPredictor(oracle))
    cluster.add_node(0)
    out = g.place("f1", 4, 0)
    assert out.admitted == 4 and out.inference_events == 4
    assert all(p.path == "Gsight" for p in out.placements)
    assert out.cost_ms >= 4 * 20.0


@settings(max_examples=40, deadline=None)
@given(
    st.dictionaries(st.sampled_from(["f1", "f2", "f3", "f4"]), st.integers(1, 6), max_size=3),
    st.sampled_from(["f1", "f2", "f3", "f4"]),
)
def test_gsight_agrees_with_capacity_slow_path(roster, target):
    oracle, specs = make_world(n=4, noise=0.0)
    roster = {f: ci(s) for f, s in roster.items()}
    if not oracle.feasible(roster, specs):
        return
    g = GsightScheduler(Cluster(specs, (48.0, 48.0)), PerfectPredictor(oracle))
    ok, _, _ = g.validate(roster, target)
    cap = compute_capacity(roster, target, PerfectPredictor(oracle), specs).capacity
    current = roster.get(target, ci(0)).saturated
    assert ok == (cap >= current + 1)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["f1", "f2", "f3"]), st.integers(1, 6)), min_size=1, max_size=12))
def test_no_admission_beyond_capacity_minus_pending(requests):
    oracle, specs = make_world(n=3, noise=0.0)
    cluster, sched, engine, posted, log = setup(oracle, specs)
    for t, (fid, k) in enumerate(requests):
        before = {nid: n.headroom(fid) for nid, n in cluster.nodes.items()}
        out = sched.place(fid, k, t)
        for p in out.placements:
            if p.path == "Fast":
                assert p.admitted <= before[p.node_id]
        # under the perfect predictor nothing ever exceeds true capacity
        for node in cluster.nodes.values():
            for f, info in node.roster.items():
                assert info.saturated <= oracle.brute_force_capacity(f, node.roster, specs)
        cluster.audit()
    assert all(r["path"] in ("Fast", "Slow") for r in log if r["type"] == "schedule")


def test_migration_target_needs_room_for_cached(exact):
    oracle, specs = exact
    cluster, sched, *_ = setup(oracle, specs)
    a, b = cluster.add_node(0), cluster.add_node(0)
    fill(cluster, b, "f1", 2)
    rec = cluster.on_node(b.id, "f1", InstanceState.SATURATED)[0]
    cluster.transition(rec, InstanceState.CACHED, 0, cause="test")
    install_entry(b, "f1", 2, 0)
    # b: capacity 2, 1 saturated, 1 cached -> no room; a is fresh
    node, cost, inferences = sched.migration_target("f1", exclude="none", now=0)
    assert node is a and inferences == 1
