import numpy as np
import pytest

from cascade_draft.drafter import CascadeDrafter, DrafterConfig
from cascade_draft.target_model import ModelConfig, TargetModel


TINY = ModelConfig(vocab_size=32, hidden_dim=16, num_layers=3, num_heads=2, max_positions=96)


@pytest.fixture
def tiny_target():
    return TargetModel.init(TINY, seed=0)


@pytest.fixture
def tiny_drafter(tiny_target):
    return CascadeDrafter.init(DrafterConfig(depth=3, hidden_dim=16, num_heads=2), tiny_target, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_prompts(vocab, n, length, seed):
    r = np.random.default_rng(seed)
    return [r.integers(0, vocab, size=length).tolist() for _ in range(n)]
