import numpy as np
import pytest
from hypothesis import settings

from drk.tensor import Rng

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return Rng(1234)


def small_array(rng, shape, scale=1.0):
    return scale * rng.gen.standard_normal(shape)


@pytest.fixture(scope="session")
def tiny_dataset():
    from drk import toydata

    return toydata.generate(toydata.DatasetSpec(n_samples=24, size=32, seed=3))
