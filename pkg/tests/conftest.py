import numpy as np
import pytest
import torch

from patchvae.model import ModelConfig

torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(N=4, d_p=3, d_e=16, stem_channels=8, H=16, W=16, head_channels=8,
                       decoder_channels=(16, 8, 8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
