import numpy as np
import pytest

from utils.aft.data import ClusteredDataset, validate_dataset
from utils.aft.oracles import random_dataset, random_weights
from utils.aft.simulation import SimulationScenario, generate_dataset
from utils.aft.stats_prims import RngStream


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行耗时的蒙特卡洛验收测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 耗时的蒙特卡洛测试，需 --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return RngStream(12345).generator()


@pytest.fixture
def tiny_data():
    """两簇三观测，手算用."""
    return validate_dataset(
        ClusteredDataset.from_arrays(
            log_time=[0.5, 1.0, 2.0],
            delta=[1, 0, 1],
            covariates=[[1.0, 0.0], [0.0, 1.0], [2.0, 1.0]],
            cluster_index=[0, 0, 1],
        )
    )


@pytest.fixture
def small_random(rng):
    data = random_dataset(rng, n_clusters=5, max_size=4, p=2)
    return data, random_weights(rng, data)


@pytest.fixture(scope="session")
def simulated():
    """N=50 的一次模拟数据，τ 固定以避免校准开销."""
    scenario = SimulationScenario(n_clusters=50, rho=0.5, censoring_target=0.15, seed=7)
    return generate_dataset(scenario, RngStream(7, 1).generator(), tau=60.0)
