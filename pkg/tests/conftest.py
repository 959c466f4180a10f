import numpy as np
import pytest

from support import make_camera


@pytest.fixture
def eval_camera():
    return make_camera()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
