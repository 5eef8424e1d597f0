import numpy as np
import pytest

from lidarflow.model import ModelConfig, init_params

# narrow channels, same topology: keeps model-level tests in seconds
TINY = ModelConfig(
    pyramid_channels=(1, 4, 4, 8, 8, 8, 8),
    estimator_channels=(8, 8, 8, 8, 8, 2),
    context_channels=(8, 8, 8, 8, 8, 8, 2),
    adapter_channels=4,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_params():
    return init_params(TINY, seed=0)


def zero_flows(n, h, w, dtype=np.float32):
    from lidarflow.tensor import Tensor

    return {l: Tensor(np.zeros((n, 2, h >> (l - 1), w >> (l - 1)), dtype)) for l in range(1, 8)}


# a clearly nonzero starting flow, so identity tests are not passed by initialisation
IDENTITY_START_BIAS = np.array([0.8, -0.6], np.float32).reshape(1, 2, 1, 1)


@pytest.fixture(scope="session")
def identity_model():
    """TINY model trained on identical-frame pairs (64x128); returns (params, config, data)."""
    from lidarflow import synthetic, training

    params = init_params(TINY, seed=0)
    params["estimator.conv6.bias"].data[...] = IDENTITY_START_BIAS
    data = synthetic.shift_dataset(4, height=64, width=128, shift=0, seed=3)
    cfg = training.TrainConfig.for_phase("train", epochs=100, initial_lr=3e-3)
    training.train(data, cfg, params, model_config=TINY, max_steps=60)
    return params, TINY, data
