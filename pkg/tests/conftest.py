import numpy as np
import pytest

from ibpo_lab.env_chain import Op, TaskInstance


@pytest.fixture
def chain3():
    """start=3, ops=[INC1, DBL, INC2], V=16; solution [4, 8, 10, 10]."""
    return TaskInstance(3, (Op.INC1, Op.DBL, Op.INC2), 16)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
