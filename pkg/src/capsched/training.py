"""Dataset collection and model training against the contention oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .forest import ForestParams
from .model import ConcurrencyInfo, FunctionSpec
from .oracle import ContentionOracle
from .predictor import ForestModel, Sample, assemble_features, incremental_update, train


@dataclass(frozen=True)
class SamplingParams:
    n_samples: int = 2000
    max_functions: int = 6
    # node utilization (max over axes) drawn uniformly from this range
    utilization: tuple[float, float] = (0.05, 1.1)
    cached_prob: float = 0.3
    max_cached: int = 3
    holdout_fraction: float = 0.1


def sample_colocation(
    function_ids: Sequence[str],
    oracle: ContentionOracle,
    rng: np.random.Generator,
    params: SamplingParams = SamplingParams(),
) -> tuple[str, dict[str, ConcurrencyInfo]]:
    """One random node state and a target function with a saturated instance on it."""
    k = int(rng.integers(1, min(params.max_functions, len(function_ids)) + 1))
    chosen = [function_ids[i] for i in rng.choice(len(function_ids), size=k, replace=False)]
    level = rng.uniform(*params.utilization)
    sat = {f: 0 for f in chosen}
    sat[chosen[0]] = 1
    cached = {
        f: int(rng.integers(1, params.max_cached + 1)) if rng.random() < params.cached_prob else 0
        for f in chosen
    }

    def max_util() -> float:
        coloc = {f: ConcurrencyInfo(sat[f], cached[f]) for f in chosen}
        return float(oracle.utilization(coloc).max())

    while max_util() < level:
        sat[chosen[int(rng.integers(0, k))]] += 1
    coloc = {f: ConcurrencyInfo(sat[f], cached[f]) for f in chosen if sat[f] or cached[f]}
    live = [f for f in chosen if sat[f] > 0]
    target = live[int(rng.integers(0, len(live)))]
    return target, coloc


def collect_samples(
    function_ids: Sequence[str],
    specs: Mapping[str, FunctionSpec],
    oracle: ContentionOracle,
    n: int,
    rng: np.random.Generator,
    params: SamplingParams = SamplingParams(),
    noisy: bool = True,
) -> list[Sample]:
    out = []
    for _ in range(n):
        target, coloc = sample_colocation(function_ids, oracle, rng, params)
        row = assemble_features(target, coloc, specs, oracle.params.gamma)
        if noisy:
            label = oracle.observe_sample(target, coloc, rng)
        else:
            label = oracle.true_latency(target, coloc)
        out.append((row, label))
    return out


@dataclass
class AccuracyReport:
    n_train: int
    n_test: int
    median_error: float
    p90_error: float
    mean_error: float

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_test": self.n_test,
            "median_error": self.median_error,
            "p90_error": self.p90_error,
            "mean_error": self.mean_error,
        }


def evaluate(model: ForestModel, samples: Sequence[Sample], true_labels: Sequence[float] | None = None) -> np.ndarray:
    """Relative errors of ``model`` on ``samples`` (against ``true_labels`` if given)."""
    X = np.vstack([r for r, _ in samples])
    ref = np.asarray(true_labels if true_labels is not None else [v for _, v in samples])
    pred = model.predict_latency(X)
    return np.abs(pred - ref) / ref


@dataclass
class PipelineResult:
    model: ForestModel
    report: AccuracyReport
    train_set: list[Sample] = field(repr=False)
    test_set: list[Sample] = field(repr=False)


def train_pipeline(
    specs: Mapping[str, FunctionSpec],
    oracle: ContentionOracle,
    seed: int,
    sampling: SamplingParams = SamplingParams(),
    forest: ForestParams | None = None,
    function_ids: Sequence[str] | None = None,
) -> PipelineResult:
    """Sample colocations, label them with noisy observations, split, train and score.

    Held-out error is measured against the noisy observations, the same way a
    deployment would measure it against monitored latencies.
    """
    fids = sorted(function_ids if function_ids is not None else specs)
    if not fids:
        raise ValueError("no functions to sample")
    if sampling.n_samples < 10:
        raise ValueError("need at least 10 samples")
    rng = np.random.default_rng([seed, 7])
    data = collect_samples(fids, specs, oracle, sampling.n_samples, rng, sampling)
    n_test = max(1, int(round(sampling.holdout_fraction * len(data))))
    train_set, test_set = data[:-n_test], data[-n_test:]
    params = forest or ForestParams(seed=seed)
    model = train(train_set, params, gamma_feat=oracle.params.gamma)
    errs = evaluate(model, test_set)
    report = AccuracyReport(
        n_train=len(train_set),
        n_test=len(test_set),
        median_error=float(np.median(errs)),
        p90_error=float(np.quantile(errs, 0.9)),
        mean_error=float(np.mean(errs)),
    )
    return PipelineResult(model, report, train_set, test_set)


@dataclass
class ConvergenceTrace:
    function_id: str
    # errors[i] is the median held-out error on the new function after i samples
    errors: list[float]
    threshold: float

    @property
    def samples_to_converge(self) -> int | None:
        for i, e in enumerate(self.errors):
            if e <= self.threshold:
                return i
        return None


def leave_one_out_convergence(
    specs: Mapping[str, FunctionSpec],
    oracle: ContentionOracle,
    held_out: str,
    seed: int,
    max_new_samples: int = 30,
    threshold: float = 0.15,
    n_base: int = 1500,
    n_probe: int = 200,
    forest: ForestParams | None = None,
) -> ConvergenceTrace:
    """Train without ``held_out``, then feed its samples one at a time and retrain each time."""
    fids = sorted(specs)
    base_ids = [f for f in fids if f != held_out]
    rng = np.random.default_rng([seed, 11])
    base = collect_samples(base_ids, specs, oracle, n_base, rng)
    model = train(base, forest or ForestParams(seed=seed), gamma_feat=oracle.params.gamma)

    def held_out_samples(n: int) -> tuple[list[Sample], list[float]]:
        samples, truth = [], []
        while len(samples) < n:
            _, coloc = sample_colocation(fids, oracle, rng)
            if coloc.get(held_out, ConcurrencyInfo()).saturated == 0:
                continue
            row = assemble_features(held_out, coloc, specs, oracle.params.gamma)
            samples.append((row, oracle.observe_sample(held_out, coloc, rng)))
            truth.append(oracle.true_latency(held_out, coloc))
        return samples, truth

    # probe error is against noise-free latency so it measures the model, not the noise
    probe, probe_truth = held_out_samples(n_probe)
    errors = [float(np.median(evaluate(model, probe, probe_truth)))]
    new_samples, _ = held_out_samples(max_new_samples)
    for sample in new_samples:
        model = incremental_update(model, [sample])
        errors.append(float(np.median(evaluate(model, probe, probe_truth))))
    return ConvergenceTrace(held_out, errors, threshold)
