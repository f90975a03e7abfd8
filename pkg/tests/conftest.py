import numpy as np
import pytest

from dldlscore.model import build_model
from dldlscore.synthdata import SynthSpec, generate
from helpers import TINY_NECK, TINY_VIT, ds_head, env_heads


@pytest.fixture
def tiny_model():
    return build_model(TINY_VIT, TINY_NECK, [ds_head()], seed=0)


@pytest.fixture
def tiny_env_model():
    return build_model(TINY_VIT, TINY_NECK, env_heads(), seed=0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """2 datasets x 22 images, 24 px: fast enough for training smoke tests."""
    out = tmp_path_factory.mktemp("tiny_data")
    return generate(SynthSpec(num_datasets=2, images_per_dataset=22, image_size=24, noise=0.1, seed=5, num_dates=4, season_days=60), out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

