"""Function-granularity latency predictor.

A colocation is encoded as one fixed-width row per target function: the
target's solo latency, profile and concurrency, followed by a pooled
summary of every other function on the node. The forest regresses the
slowdown ratio (latency / solo latency) and predictions are scaled back to
milliseconds by the solo latency carried in the row.
"""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Protocol, Sequence

import numpy as np

from .forest import ForestParams, RegressionForest, fit_forest
from .model import Colocation, FunctionSpec
from .oracle import ContentionOracle

MODEL_FORMAT = "capsched-forest/1"


def feature_width(profile_width: int) -> int:
    # solo, profile, (sat, cached), sum pool, max pool, (sum sat, sum cached)
    return 1 + profile_width + 2 + 2 * profile_width + 2


def assemble_features(
    target: str,
    colocation: Colocation,
    specs: Mapping[str, FunctionSpec],
    gamma_feat: float,
) -> np.ndarray:
    if target not in colocation:
        raise KeyError(f"target {target!r} missing from colocation")
    try:
        tspec = specs[target]
    except KeyError:
        raise KeyError(f"unknown function {target!r}") from None
    width = len(tspec.profile)
    sum_pool = np.zeros(width)
    max_pool = np.zeros(width)
    n_sat = n_cached = 0
    for fid, info in colocation.items():
        if fid == target:
            continue
        try:
            prof = specs[fid].profile.features
        except KeyError:
            raise KeyError(f"unknown function {fid!r}") from None
        if len(prof) != width:
            raise ValueError(f"profile width mismatch: {fid} has {len(prof)}, {target} has {width}")
        p = np.asarray(prof)
        sum_pool += (info.saturated + gamma_feat * info.cached) * p
        if info.total > 0:
            np.maximum(max_pool, p, out=max_pool)
        n_sat += info.saturated
        n_cached += info.cached
    own = colocation[target]
    return np.concatenate(
        [
            [tspec.solo_latency_ms],
            tspec.profile.features,
            [own.saturated, own.cached],
            sum_pool,
            max_pool,
            [n_sat, n_cached],
        ]
    )


@dataclass(frozen=True)
class InferenceCostModel:
    c0_ms: float = 20.0
    c1_ms_per_row: float = 0.02

    def __post_init__(self):
        if self.c0_ms < 0 or self.c1_ms_per_row < 0:
            raise ValueError("inference cost constants must be non-negative")

    def cost(self, n_rows: int) -> float:
        return self.c0_ms + self.c1_ms_per_row * n_rows


class BatchResult(NamedTuple):
    predictions: list[float]
    cost_ms: float
    inference_events: int


@dataclass
class ForestModel:
    forest: RegressionForest
    profile_width: int
    gamma_feat: float
    # cumulative training set, kept so the model can be retrained with new samples
    train_X: np.ndarray | None = field(default=None, repr=False)
    train_y: np.ndarray | None = field(default=None, repr=False)

    @property
    def params(self) -> ForestParams:
        return self.forest.params

    @property
    def width(self) -> int:
        return self.forest.n_features

    def predict_latency(self, rows) -> np.ndarray:
        X = np.atleast_2d(np.asarray(rows, dtype=float))
        return self.forest.predict(X) * X[:, 0]

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "profile_width": self.profile_width,
            "gamma_feat": self.gamma_feat,
            "label": "slowdown_ratio",
            "forest": self.forest.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a {MODEL_FORMAT} model file")
        return cls(RegressionForest.from_dict(d["forest"]), int(d["profile_width"]), float(d["gamma_feat"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "ForestModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


Sample = tuple[np.ndarray, float]


def _stack(dataset: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    X = np.vstack([np.asarray(r, dtype=float) for r, _ in dataset])
    lat = np.asarray([v for _, v in dataset], dtype=float)
    if not np.all(np.isfinite(lat)):
        raise ValueError("non-finite labels")
    return X, lat


def train(
    dataset: Sequence[Sample], params: ForestParams = ForestParams(), gamma_feat: float = 0.1
) -> ForestModel:
    X, lat = _stack(dataset)
    profile_width = (X.shape[1] - 5) // 3
    if feature_width(profile_width) != X.shape[1]:
        raise ValueError(f"row width {X.shape[1]} does not match any profile width")
    if np.any(X[:, 0] <= 0):
        raise ValueError("solo latency column must be positive")
    forest = fit_forest(X, lat / X[:, 0], params)
    return ForestModel(forest, profile_width, gamma_feat, X, lat)


def incremental_update(model: ForestModel, new_samples: Sequence[Sample]) -> ForestModel:
    """Retrain on the model's cumulative dataset plus ``new_samples`` (same seed)."""
    if len(new_samples) == 0:
        raise ValueError("no new samples")
    X_new, lat_new = _stack(new_samples)
    if X_new.shape[1] != model.width:
        raise ValueError(f"row width {X_new.shape[1]} != model width {model.width}")
    if model.train_X is None:
        raise ValueError("model carries no training set; load the dataset and call train()")
    X = np.vstack([model.train_X, X_new])
    lat = np.concatenate([model.train_y, lat_new])
    forest = fit_forest(X, lat / X[:, 0], model.params)
    return ForestModel(forest, model.profile_width, model.gamma_feat, X, lat)


def predict_batch(
    model: ForestModel, rows: Sequence[np.ndarray], cost: InferenceCostModel = InferenceCostModel()
) -> BatchResult:
    """One inference call over any number of rows; cost is affine in the row count."""
    if len(rows) == 0:
        raise ValueError("empty batch")
    X = np.vstack([np.asarray(r, dtype=float) for r in rows])
    if X.shape[1] != model.width:
        raise ValueError(f"row width {X.shape[1]} != model width {model.width}")
    preds = model.predict_latency(X)
    return BatchResult([float(p) for p in preds], cost.cost(len(rows)), 1)


Query = tuple[str, Colocation]


class Predictor(Protocol):
    cost_model: InferenceCostModel

    def predict(self, queries: Sequence[Query]) -> BatchResult: ...


def colocation_key(target: str, colocation: Colocation) -> tuple:
    return (target, tuple(sorted((f, c.saturated, c.cached) for f, c in colocation.items() if c)))


class _Memo:
    """Bounded memo of predictions; the charged cost never depends on hits."""

    def __init__(self, limit: int = 500_000):
        self.limit = limit
        self.data: dict[tuple, float] = {}

    def lookup(self, queries: Sequence[Query], compute) -> list[float]:
        keys = [colocation_key(t, c) for t, c in queries]
        missing = {}
        for k, q in zip(keys, queries):
            if k not in self.data and k not in missing:
                missing[k] = q
        if missing:
            if len(self.data) + len(missing) > self.limit:
                self.data.clear()
            values = compute(list(missing.values()))
            self.data.update(zip(missing.keys(), values))
        return [self.data[k] for k in keys]


class ForestPredictor:
    def __init__(
        self,
        model: ForestModel,
        specs: Mapping[str, FunctionSpec],
        cost_model: InferenceCostModel = InferenceCostModel(),
    ):
        self.model = model
        self.specs = specs
        self.cost_model = cost_model
        self._memo = _Memo()

    def _compute(self, queries: Sequence[Query]) -> list[float]:
        rows = [assemble_features(t, c, self.specs, self.model.gamma_feat) for t, c in queries]
        return [float(v) for v in self.model.predict_latency(np.vstack(rows))]

    def predict(self, queries: Sequence[Query]) -> BatchResult:
        if len(queries) == 0:
            raise ValueError("empty batch")
        preds = self._memo.lookup(queries, self._compute)
        return BatchResult(preds, self.cost_model.cost(len(queries)), 1)


class PerfectPredictor:
    """Oracle-backed stand-in with the same interface and cost accounting."""

    def __init__(self, oracle: ContentionOracle, cost_model: InferenceCostModel = InferenceCostModel()):
        self.oracle = oracle
        self.cost_model = cost_model
        self._memo = _Memo()

    def _compute(self, queries: Sequence[Query]) -> list[float]:
        return [self.oracle.true_latency(t, c) for t, c in queries]

    def predict(self, queries: Sequence[Query]) -> BatchResult:
        if len(queries) == 0:
            raise ValueError("empty batch")
        preds = self._memo.lookup(queries, self._compute)
        return BatchResult(preds, self.cost_model.cost(len(queries)), 1)


def relative_error(predicted: float, observed: float) -> float:
    return abs(predicted - observed) / observed


class Verdict(str, enum.Enum):
    OK = "OK"
    RETRAIN = "Retrain"
    FALLBACK = "Fallback"


@dataclass
class _FunctionWatch:
    errors: deque = field(default_factory=lambda: deque(maxlen=32))
    bad_streak: int = 0
    good_streak: int = 0
    retrains: int = 0
    fallback: bool = False


@dataclass
class PredictabilityMonitor:
    """Tracks per-function prediction error and escalates OK -> Retrain -> Fallback.

    Every observation closes one window. ``consecutive_bad_limit`` bad windows
    in a row ask for a retrain; once ``retrain_limit`` retrains have not
    brought the error back under the threshold, the function falls back to
    the conservative policy for good. The retrain count only resets after
    as many good windows in a row, so a lucky sample does not hide a bad model.
    """

    error_threshold: float = 0.15
    consecutive_bad_limit: int = 3
    retrain_limit: int = 5
    watches: dict[str, _FunctionWatch] = field(default_factory=dict)

    def record_observation(self, function_id: str, predicted: float, observed: float) -> Verdict:
        if predicted <= 0 or observed <= 0:
            raise ValueError("latencies must be positive")
        w = self.watches.setdefault(function_id, _FunctionWatch())
        if w.fallback:
            return Verdict.FALLBACK
        err = relative_error(predicted, observed)
        w.errors.append(err)
        if err <= self.error_threshold:
            w.bad_streak = 0
            w.good_streak += 1
            if w.good_streak >= self.consecutive_bad_limit:
                w.retrains = 0
            return Verdict.OK
        w.good_streak = 0
        w.bad_streak += 1
        if w.bad_streak < self.consecutive_bad_limit:
            return Verdict.OK
        w.bad_streak = 0
        if w.retrains >= self.retrain_limit:
            w.fallback = True
            return Verdict.FALLBACK
        w.retrains += 1
        return Verdict.RETRAIN

    def in_fallback(self, function_id: str) -> bool:
        w = self.watches.get(function_id)
        return bool(w and w.fallback)

    def recent_error(self, function_id: str) -> float | None:
        w = self.watches.get(function_id)
        if not w or not w.errors:
            return None
        return float(np.mean(w.errors))

