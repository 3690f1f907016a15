import numpy as np
import pytest

from compnet.data import Sample
from compnet.network import init_params, toy_network_spec


def jitter_biases(params, seed=3, lo=0.05, hi=0.3):
    """Move biases off zero so relu inputs sit away from the kink inside
    masked-out regions; gradient checks need a generic point."""
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        if name.endswith(".bias"):
            p.value = p.value + rng.uniform(lo, hi, p.value.shape)
    return params


def two_object_sample(frame=16, seed=7, labels=(0, 2)):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, 1.0, (frame, frame, 1))
    m1 = np.zeros((frame, frame))
    m1[1:frame // 2, 1:frame // 2] = 1.0
    m2 = np.zeros((frame, frame))
    m2[frame // 2:frame - 1, frame // 2:frame - 1] = 1.0
    return Sample(image=img, masks=[m1, m2], labels=list(labels))


@pytest.fixture
def toy_net():
    return toy_network_spec()


@pytest.fixture
def toy_params(toy_net):
    return jitter_biases(init_params(toy_net, np.random.default_rng(2)))


@pytest.fixture
def toy_sample():
    return two_object_sample()
