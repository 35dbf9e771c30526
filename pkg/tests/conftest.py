import numpy as np
import pytest

from capsched.config import load_config
from capsched.model import ConcurrencyInfo, FunctionSpec, ProfileVector
from capsched.oracle import (
    ContentionOracle,
    FunctionGroundTruth,
    OracleParams,
    build_specs,
    sample_ground_truth,
    stream,
)
from capsched.sim import build_world, train_model


def make_world(n=4, seed=3, noise=0.05, bound=16):
    params = OracleParams(seed=seed, noise_sigma=noise)
    truths = sample_ground_truth(n, params, stream(seed, "functions"))
    oracle = ContentionOracle(params, truths)
    loads = {f: 10.0 for f in truths}
    specs = build_specs(oracle, stream(seed, "profiling"), loads, max_capacity_bound=bound)
    return oracle, specs


def flat_spec(fid="f1", solo=100.0, load=10.0, bound=16, width=13):
    return FunctionSpec(fid, solo, ProfileVector((0.1,) * width), load, max_capacity_bound=bound)


def toy_oracle(demand=0.1, sens=4.0, axes=4, theta=0.6, noise=0.0, fids=("f1", "f2")):
    params = OracleParams(resource_axes=axes, theta=theta, noise_sigma=noise)
    truths = {
        f: FunctionGroundTruth((demand,) * axes, (sens,) * axes, 100.0)
        for f in fids
    }
    return ContentionOracle(params, truths)


def ci(s, c=0):
    return ConcurrencyInfo(s, c)


@pytest.fixture(scope="session")
def world():
    return make_world()


@pytest.fixture(scope="session")
def default_cfg():
    return load_config(None, ["predictor.n_samples=600", "predictor.n_trees=20"], seed=1)


@pytest.fixture(scope="session")
def default_world(default_cfg):
    return build_world(default_cfg)


@pytest.fixture(scope="session")
def small_model(default_cfg, default_world):
    return train_model(default_cfg, default_world).model


@pytest.fixture
def rng():
    return np.random.default_rng(0)
