"""Pytest configuration and fixtures."""

import logging

import pytest

from consistency_mc.scenario import ScenarioSpec
from tests.helpers.env import load_env_config, slow_tests_enabled
from tests.helpers.scenarios import build_scenario


# Configure logging for tests
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)


def pytest_collection_modifyitems(config, items):
    """Skip desk-scale tests unless CONSISTENCY_MC_SLOW is set."""
    if slow_tests_enabled():
        return
    skip_slow = pytest.mark.skip(reason="set CONSISTENCY_MC_SLOW=1 to run desk-scale scenarios")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session", autouse=True)
def load_env() -> None:
    """Load environment configuration at test session start."""
    load_env_config()


@pytest.fixture
def consistent_spec() -> ScenarioSpec:
    """Small stochastic-theta scenario with eta = 0, beta = -theta/2."""
    return build_scenario("consistent")


@pytest.fixture
def beta_zero_spec() -> ScenarioSpec:
    """Same market with beta = 0, which breaks consistency."""
    return build_scenario("beta_zero", risk={"beta": 0.0})


@pytest.fixture
def merton_spec() -> ScenarioSpec:
    """Constant theta = -0.2 with deterministic exponential utility."""
    return build_scenario("merton", market={"mu": 0.05}, utility={"family": "det_exp", "params": {"gamma": 1.0}})


@pytest.fixture
def power_spec() -> ScenarioSpec:
    """Constant theta = -0.2 with power utility, gamma = 1/2."""
    return build_scenario("power", market={"mu": 0.05}, utility={"family": "power", "params": {"gamma": 0.5}})


@pytest.fixture
def forward_spec() -> ScenarioSpec:
    """Forward-performance family with beta = 0.1."""
    return build_scenario("forward", risk={"eta": "forward", "beta": 0.1})


@pytest.fixture
def noise_spec() -> ScenarioSpec:
    """Multiplicative noise with beta = theta - 0.1, so (theta - beta)^2 = 0.01."""
    return build_scenario("noise", risk={"beta": 0.0}, utility={
        "family": "mult_noise", "params": {"beta": {"expr": "theta - 0.1", "bound": 0.4}, "gamma": 1.0}})
