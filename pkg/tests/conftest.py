import numpy as np
import pytest

from etcomm.comm import TriggerConfig
from etcomm.env import EnvConfig
from etcomm.losses import LossConfig
from etcomm.mappo import TrainConfig
from etcomm.nets import NetConfig, build_params
from helpers import ACCEPTANCE_LINES


@pytest.fixture
def small_cfgs():
    """A 4-agent, 10-step setup that trains in well under a second per epoch."""
    env_cfg = EnvConfig(n_agents=4, episode_len=10, comm_range=2.4)
    net_cfg = NetConfig(n_agents=4, d_m=8, d_pe=8, n_heads=2, d_hidden=16)
    return {
        "env": env_cfg,
        "net": net_cfg,
        "train": TrainConfig(epochs=3, ppo_epochs=2, seed=3),
        "loss": LossConfig(),
        "trigger": TriggerConfig(),
    }


@pytest.fixture
def small_params(small_cfgs):
    return build_params(small_cfgs["net"], seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
