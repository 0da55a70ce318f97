import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model_config():
    """Smallest config whose windows still tile a 16x16 input."""
    from stainr.model import ModelConfig
    return ModelConfig(levels=2, blocks_per_level=(1, 1), base_channels=4,
                       heads_per_level=(1, 2), n_part=6, n_ins=4, n_sem=3,
                       q_window=4)
