import numpy as np
import pytest

from swarmseg.config import ModelConfig, WorldConfig
from swarmseg.model import init_model
from swarmseg.world import make_dataset

# 32x32 views on a 4x4 feature grid keep every forward pass in the millisecond range
TINY_WORLD = WorldConfig(
    world_rows=64, world_cols=64, view_rows=32, view_cols=32, feat_rows=4, feat_cols=4,
    n_classes=4, n_agents=3, overlap_target=0.4, region_size=12, obstruction_min=4, obstruction_max=8,
)
TINY_MODEL = ModelConfig(feature_dim=8, hidden_dim=8, query_dim=4, key_dim=6, smoother_width=8, stack_agents=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_world():
    return TINY_WORLD


@pytest.fixture(scope="session")
def tiny_samples():
    return make_dataset(TINY_WORLD, 3, seed=5)


@pytest.fixture
def tiny_model():
    return init_model(TINY_MODEL, TINY_WORLD, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.LINES:
            terminalreporter.write_line(line)
