import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsched.forest import ForestParams
from capsched.predictor import (
    ForestModel,
    ForestPredictor,
    InferenceCostModel,
    PerfectPredictor,
    PredictabilityMonitor,
    Verdict,
    assemble_features,
    colocation_key,
    feature_width,
    incremental_update,
    predict_batch,
    train,
)
from capsched.training import collect_samples

from conftest import ci, make_world


@pytest.fixture(scope="module")
def trained():
    oracle, specs = make_world(n=4)
    data = collect_samples(sorted(specs), specs, oracle, 300, np.random.default_rng(0))
    model = train(data, ForestParams(n_trees=10, seed=0), gamma_feat=oracle.params.gamma)
    return oracle, specs, data, model


def test_feature_width_matches_rows(world):
    oracle, specs = world
    row = assemble_features("f1", {"f1": ci(2, 1), "f2": ci(1)}, specs, 0.1)
    assert row.shape == (feature_width(13),) == (44,)
    assert row[0] == specs["f1"].solo_latency_ms
    assert tuple(row[14:16]) == (2, 1)
    assert tuple(row[-2:]) == (1, 0)


def test_features_ignore_neighbor_order(world):
    _, specs = world
    a = assemble_features("f1", {"f1": ci(1), "f2": ci(2), "f3": ci(0, 3)}, specs, 0.1)
    b = assemble_features("f1", {"f3": ci(0, 3), "f2": ci(2), "f1": ci(1)}, specs, 0.1)
    assert np.array_equal(a, b)


def test_features_errors(world):
    _, specs = world
    with pytest.raises(KeyError):
        assemble_features("f1", {"f2": ci(1)}, specs, 0.1)
    with pytest.raises(KeyError):
        assemble_features("f1", {"f1": ci(1), "zz": ci(1)}, specs, 0.1)


def test_cost_is_affine():
    cm = InferenceCostModel(20.0, 0.02)
    assert cm.cost(1) == pytest.approx(20.02)
    assert cm.cost(500) == pytest.approx(30.0)
    with pytest.raises(ValueError):
        InferenceCostModel(-1.0)


def test_predict_batch_single_event(trained):
    _, _, data, model = trained
    rows = [r for r, _ in data[:7]]
    res = predict_batch(model, rows)
    assert res.inference_events == 1 and len(res.predictions) == 7
    assert res.cost_ms == pytest.approx(20.0 + 0.02 * 7)
    with pytest.raises(ValueError):
        predict_batch(model, [])
    with pytest.raises(ValueError):
        predict_batch(model, [np.zeros(10)])


def test_model_round_trip(tmp_path, trained):
    _, _, data, model = trained
    path = tmp_path / "m.json"
    model.save(path)
    loaded = ForestModel.load(path)
    X = np.vstack([r for r, _ in data[:20]])
    assert np.array_equal(model.predict_latency(X), loaded.predict_latency(X))
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        ForestModel.load(path)


def test_train_rejects_bad_rows():
    with pytest.raises(ValueError):
        train([(np.ones(10), 1.0)])
    with pytest.raises(ValueError):
        train([])


def test_incremental_update_grows_dataset(trained):
    oracle, specs, data, model = trained
    more = collect_samples(sorted(specs), specs, oracle, 5, np.random.default_rng(9))
    new = incremental_update(model, more)
    assert len(new.train_y) == len(model.train_y) + 5
    loaded = ForestModel.from_dict(model.to_dict())
    with pytest.raises(ValueError):
        incremental_update(loaded, more)
    with pytest.raises(ValueError):
        incremental_update(model, [])


def test_memo_still_charges_cost(trained):
    oracle, specs, _, model = trained
    p = ForestPredictor(model, specs)
    q = [("f1", {"f1": ci(3)})]
    a = p.predict(q)
    b = p.predict(q)
    assert a.predictions == b.predictions
    assert a.cost_ms == b.cost_ms > 0 and b.inference_events == 1


def test_perfect_predictor_is_oracle(world):
    oracle, specs = world
    p = PerfectPredictor(oracle)
    coloc = {"f1": ci(5), "f2": ci(3, 1)}
    res = p.predict([("f1", coloc), ("f2", coloc)])
    assert res.predictions == [oracle.true_latency("f1", coloc), oracle.true_latency("f2", coloc)]
    with pytest.raises(ValueError):
        p.predict([])


def test_colocation_key_drops_empty_slots():
    assert colocation_key("f1", {"f1": ci(1), "f2": ci(0, 0)}) == colocation_key("f1", {"f1": ci(1)})


def test_monitor_escalation():
    m = PredictabilityMonitor(error_threshold=0.1, consecutive_bad_limit=2, retrain_limit=2)
    verdicts = [m.record_observation("f", 100.0, 150.0) for _ in range(6)]
    assert verdicts == [
        Verdict.OK, Verdict.RETRAIN,
        Verdict.OK, Verdict.RETRAIN,
        Verdict.OK, Verdict.FALLBACK,
    ]
    assert m.in_fallback("f")
    assert m.record_observation("f", 100.0, 100.0) is Verdict.FALLBACK


def test_monitor_single_good_window_does_not_reset_retrains():
    m = PredictabilityMonitor(error_threshold=0.1, consecutive_bad_limit=2, retrain_limit=1)
    bad = lambda: m.record_observation("f", 100.0, 150.0)  # noqa: E731
    good = lambda: m.record_observation("f", 100.0, 100.0)  # noqa: E731
    assert [bad(), bad()] == [Verdict.OK, Verdict.RETRAIN]
    good()
    assert [bad(), bad()] == [Verdict.OK, Verdict.FALLBACK]


def test_monitor_recovers_after_good_streak():
    m = PredictabilityMonitor(error_threshold=0.1, consecutive_bad_limit=2, retrain_limit=1)
    m.record_observation("f", 100.0, 150.0)
    assert m.record_observation("f", 100.0, 150.0) is Verdict.RETRAIN
    m.record_observation("f", 100.0, 100.0)
    m.record_observation("f", 100.0, 100.0)
    m.record_observation("f", 100.0, 150.0)
    assert m.record_observation("f", 100.0, 150.0) is Verdict.RETRAIN
    assert m.recent_error("f") is not None and m.recent_error("g") is None
    with pytest.raises(ValueError):
        m.record_observation("f", 0.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.5, 2.0), min_size=1, max_size=40))
def test_monitor_never_falls_back_when_accurate(ratios):
    m = PredictabilityMonitor(error_threshold=1.0)
    for r in ratios:
        assert m.record_observation("f", 100.0 * r, 100.0) is Verdict.OK
