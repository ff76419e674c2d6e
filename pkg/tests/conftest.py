import numpy as np
import pytest

from teamaware.agent import AgentSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_spec(**kwargs) -> AgentSpec:
    base = dict(obs_dim=7, n_agents=2, n_actions=3, hidden_dim=10,
                aware_dim=2, aware_hidden_dim=12)
    base.update(kwargs)
    return AgentSpec(**base)
