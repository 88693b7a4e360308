import numpy as np
import pytest

from recistseg.fixtures import random_weights, tiny_config
from recistseg.lens import ModelWeights
from recistseg.model import ModelConfig


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_weights(tiny_cfg):
    return ModelWeights(
        tensors=random_weights(tiny_cfg, seed=7),
        version=1,
        fingerprint=tiny_cfg.fingerprint(),
        config=tiny_cfg,
    )


@pytest.fixture(scope="session")
def default_cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def default_weights(default_cfg):
    return ModelWeights(
        tensors=random_weights(default_cfg, seed=11),
        version=1,
        fingerprint=default_cfg.fingerprint(),
        config=default_cfg,
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
