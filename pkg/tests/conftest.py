import numpy as np
import pytest
import torch

from lipsynth.corpus import default_inventory, generate_corpus


@pytest.fixture(scope="session")
def inventory():
    return default_inventory()


@pytest.fixture(scope="session")
def small_clips():
    return generate_corpus(12, seed=3, resolution=48, noise_level=0.05)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
