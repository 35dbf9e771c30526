import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsched.model import ConcurrencyInfo
from capsched.oracle import (
    ContentionOracle,
    FunctionGroundTruth,
    OracleParams,
    profile_expansion,
    stream,
)

from conftest import ci, flat_spec, make_world, toy_oracle


def test_below_threshold_is_solo():
    o = toy_oracle(demand=0.1)
    # 6 instances -> u = 0.6, right at theta
    assert o.true_latency("f1", {"f1": ci(6)}) == pytest.approx(100.0)


def test_penalty_formula():
    o = toy_oracle(demand=0.1, sens=4.0, axes=2)
    # u = 0.8 on both axes, over = 0.2, penalty = 2 * 4 * 0.04
    assert o.true_latency("f1", {"f1": ci(8)}) == pytest.approx(100.0 * (1 + 0.32))


def test_cached_contributes_gamma():
    o = toy_oracle(demand=0.1)
    u = o.utilization({"f1": ci(2, 10)})
    assert u == pytest.approx(np.full(4, 0.2 + 0.1 * 1.0))


def test_unknown_function():
    o = toy_oracle()
    with pytest.raises(KeyError):
        o.true_latency("nope", {"nope": ci(1)})
    with pytest.raises(KeyError):
        o.utilization({"zz": ci(1)})


def test_params_validation():
    with pytest.raises(ValueError):
        OracleParams(theta=1.5)
    with pytest.raises(ValueError):
        OracleParams(gamma=1.0)
    with pytest.raises(ValueError):
        OracleParams(alpha=0)
    with pytest.raises(ValueError):
        FunctionGroundTruth((0.0, 0.1), (1.0, 1.0), 10.0)


def test_noise_free_observation_equals_truth():
    o = toy_oracle(noise=0.0)
    rng = np.random.default_rng(1)
    coloc = {"f1": ci(9), "f2": ci(2)}
    assert o.observe_sample("f1", coloc, rng) == o.true_latency("f1", coloc)


def test_noise_is_centered():
    o = toy_oracle(noise=0.05)
    rng = np.random.default_rng(1)
    coloc = {"f1": ci(9)}
    xs = [o.observe_sample("f1", coloc, rng) for _ in range(4000)]
    assert np.mean(xs) / o.true_latency("f1", coloc) == pytest.approx(1.0, abs=0.01)


def test_streams_are_independent_and_reproducible():
    a = stream(5, "x").random(3)
    assert np.array_equal(a, stream(5, "x").random(3))
    assert not np.array_equal(a, stream(5, "y").random(3))


def test_profile_expansion_width():
    t = FunctionGroundTruth((0.1, 0.2), (1.0, 2.0), 50.0)
    v = profile_expansion(t, 13)
    assert v.shape == (13,) and v[0] == 0.1 and v[2] == 1.0
    assert profile_expansion(t, 3).shape == (3,)


def test_brute_force_capacity_toy():
    o = toy_oracle(demand=0.1, sens=4.0, axes=1, fids=("f1",))
    spec = flat_spec("f1", solo=100.0)
    # latency = 100 (1 + 4 max(0, 0.1c - 0.6)^2) <= 120  <=>  0.1c - 0.6 <= sqrt(0.05)
    expected = int((0.6 + 0.05**0.5) / 0.1)
    assert o.brute_force_capacity("f1", {}, {"f1": spec}) == expected


coloc_strategy = st.dictionaries(
    st.sampled_from(["f1", "f2", "f3", "f4"]),
    st.tuples(st.integers(0, 8), st.integers(0, 4)).map(lambda t: ConcurrencyInfo(*t)),
    min_size=1,
)


@settings(max_examples=60, deadline=None)
@given(coloc_strategy, st.sampled_from(["f1", "f2", "f3", "f4"]), st.integers(1, 4))
def test_latency_monotone_in_any_neighbor(coloc, grow, extra):
    oracle, _ = make_world(noise=0.0)
    target = next(iter(coloc))
    base = oracle.true_latency(target, coloc)
    bigger = dict(coloc)
    cur = bigger.get(grow, ConcurrencyInfo())
    bigger[grow] = ConcurrencyInfo(cur.saturated + extra, cur.cached)
    assert oracle.true_latency(target, bigger) >= base
    assert base >= oracle.truths[target].solo_latency_ms


@settings(max_examples=40, deadline=None)
@given(coloc_strategy)
def test_brute_force_capacity_is_feasible_and_maximal(coloc):
    oracle, specs = make_world(noise=0.0)
    for fid in specs:
        cached = coloc.get(fid, ConcurrencyInfo()).cached
        trial = dict(coloc)
        trial[fid] = ConcurrencyInfo(0, cached)
        if not oracle.feasible(trial, specs):
            continue
        cap = oracle.brute_force_capacity(fid, coloc, specs)
        trial[fid] = ConcurrencyInfo(cap, cached)
        assert oracle.feasible(trial, specs)
        if cap < specs[fid].max_capacity_bound:
            trial[fid] = ConcurrencyInfo(cap + 1, cached)
            assert not oracle.feasible(trial, specs)


def test_truth_dimension_mismatch():
    params = OracleParams(resource_axes=2)
    with pytest.raises(ValueError):
        ContentionOracle(params, {"f": FunctionGroundTruth((0.1,) * 3, (1.0,) * 3, 10.0)})
