import numpy as np
import pytest
import torch

from gfenet.network import NetworkConfig
from gfenet.synthetic import synthetic_fundus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def fundus64():
    return synthetic_fundus(64, seed=3)


@pytest.fixture(scope="session")
def fundus128():
    return synthetic_fundus(128, seed=7)


@pytest.fixture
def toy_cfg():
    return NetworkConfig.toy(L=4, width=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
