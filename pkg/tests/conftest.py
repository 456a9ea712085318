import numpy as np
import pytest
import torch

from samedoct.model import ModelConfig, build_model

torch.set_num_threads(2)


TINY = dict(input_size=32, patch_size=16, embed_dim=16, num_blocks=2, num_heads=2,
            mlp_ratio=2.0, decoder_dim=16, num_classes=3, logit_downsample=4)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_image(rng, size):
    return rng.uniform(0.0, 1.0, (size, size)).astype(np.float32)
