import sys

import numpy as np
import pytest
import torch

from capplan.core import PlanWindow
from capplan.checks import TINY_CONFIG as TINY, TINY_CRITIC
from capplan.model import init_parameters

torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return init_parameters(TINY, seed=0, critic_config=TINY_CRITIC)


def random_window(rng, dim=16, T=2, n=4, vid="v0", task="task0", key=None):
    return PlanWindow(
        start_obs=rng.standard_normal(dim),
        goal_obs=rng.standard_normal(dim),
        start_caption_emb=rng.standard_normal(dim),
        goal_caption_emb=rng.standard_normal(dim),
        actions=rng.integers(n, size=T),
        source_video_id=vid,
        task_id=task,
        group_key=key,
    )


@pytest.fixture
def make_windows():
    def make(count, dim=16, T=2, n=4, seed=0):
        rng = np.random.default_rng(seed)
        return [random_window(rng, dim, T, n, vid=f"v{i}", key=f"task0:{i % 2}->{i % 2 + T}")
                for i in range(count)]
    return make


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
