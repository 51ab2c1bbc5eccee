"""
PyTest configuration and fixtures for the off-policy evaluation tests.
"""
import json
import os
from pathlib import Path

import numpy as np
import pytest

from offpolicy.environments import make_t2
from offpolicy.mdp_core import TabularPolicy, UniformPolicy

# Master seed for randomized tests - can be overridden via environment variable
TEST_SEED = int(os.getenv("OPE_TEST_SEED", "20240601"))


@pytest.fixture(scope="session")
def config():
    """Load test configuration from environment or defaults."""
    return {
        "seed": TEST_SEED,
        "workers": int(os.getenv("OPE_WORKERS", "1")),
        "mc_rollouts": int(os.getenv("OPE_TEST_ROLLOUTS", "100000")),
        "tolerance": 1e-10,
    }


@pytest.fixture(scope="session")
def test_data():
    """Load oracle values from JSON file."""
    data_path = Path(__file__).parent / "data" / "test_data.json"
    with open(data_path, "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture(scope="session")
def t2():
    """Two-step fixture with deterministic rewards."""
    return make_t2()


@pytest.fixture(scope="session")
def t2_noisy(test_data):
    """Two-step fixture whose (s1, a) reward is 1 +/- d."""
    return make_t2(reward_noise=test_data["t2"]["reward_noise"])


@pytest.fixture(scope="session")
def uniform2():
    """Uniform behavior policy over two actions."""
    return UniformPolicy(2)


@pytest.fixture(scope="session")
def always_a():
    """Target policy that always takes action a (index 0) on T2's four states."""
    table = np.zeros((4, 2))
    table[:, 0] = 1.0
    return TabularPolicy(table)


@pytest.fixture(scope="function")
def rng(config, request):
    """Per-test generator derived from the master seed and the test name."""
    salt = sum(request.node.name.encode("utf-8"))
    return np.random.default_rng([config["seed"], salt])
