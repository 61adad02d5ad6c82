import numpy as np
import pytest

from core.networks import init_bundle
from data.synthetic import generate_scenario
from schemas.config import ProbeConfig, ScenarioConfig, TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run multi-seed training acceptance runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scenario_cfg():
    return ScenarioConfig(n_source=200, n_target=200, n_target_test=40, seed=3)


@pytest.fixture
def small_data(small_scenario_cfg):
    return generate_scenario(small_scenario_cfg)


@pytest.fixture
def bundle():
    return init_bundle(input_dim=2, feature_dim=7, num_classes=2, seed=0)


@pytest.fixture
def quick_train_cfg():
    return TrainConfig(iterations=20, eval_every=10, early_stop_patience=None, k_shot=5)


@pytest.fixture
def quick_probe_cfg():
    return ProbeConfig(steps=60, batch_size=32)
