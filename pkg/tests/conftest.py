import numpy as np
import pytest
import torch

from common.image_io import BinaryMask, GrayImage
from common.network import ModelConfig
from common.run_config import RunConfig
from trainer.texture_generator import generate_texture

TINY_FILTERS = (2, 4, 8, 16, 32)


@pytest.fixture(autouse=True)
def single_thread():
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(TINY_FILTERS, (3, 4))


@pytest.fixture
def texture(rng):
    return generate_texture((64, 64), rng)


@pytest.fixture
def full_mask():
    return BinaryMask.full((64, 64))


@pytest.fixture
def run_config(tmp_path):
    cfg = RunConfig(name="test", output_dir=str(tmp_path / "runs"))
    cfg.data.images_dir = str(tmp_path / "images")
    cfg.data.pairs_dir = str(tmp_path / "pairs")
    cfg.data.image_size = 48
    cfg.data.dataset_size = 4
    cfg.data.pair_count = 3
    cfg.model.encoder_filters = list(TINY_FILTERS)
    cfg.train.epochs = 1
    cfg.train.batch_size = 2
    cfg.train.K = 16
    cfg.train.prefetch_depth = 2
    return cfg
