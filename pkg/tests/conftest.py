import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from pcdeform.synth import ChallengeSpec, make_pair, sample_primitive  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def sphere():
    return sample_primitive("sphere", 128, seed=3)


@pytest.fixture
def small_pair():
    src = sample_primitive("box", 96, seed=5)
    return make_pair(src, ChallengeSpec(deformation_level=0.2, seed=11))
