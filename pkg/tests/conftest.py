import numpy as np
import pytest

from neurocap import datagen
from neurocap.config import ModelConfig

TINY = ModelConfig(n_voxels=64, d_img=16, patch_size=16,
                   enc_hidden=32, enc_heads=2, enc_layers=3,
                   mbm_hidden=32, mbm_heads=2, mbm_layers=1,
                   dec_hidden=32, dec_heads=2, dec_layers=1,
                   embed_width=16, max_len=32)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_ds_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny_ds")
    datagen.gen_dataset(32, TINY.n_voxels, TINY.d_img, 21, d)
    return d


@pytest.fixture(scope="session")
def tiny_ds(tiny_ds_dir):
    return datagen.load_dataset(tiny_ds_dir)
