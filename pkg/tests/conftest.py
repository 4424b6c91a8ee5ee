import json

import pytest

from amvq.harness import ExperimentConfig, load_images, train_model

TINY_CONFIG = {
    "codec": {"base_channels": 4, "num_scales": 2, "feature_channels": 4, "image_height": 32, "image_width": 64},
    "train": {"steps": 12, "gan_start_step": 8},
    "K": 16,
    "synthetic_count": 2,
    "t_grid": [0.0, 0.3, 0.6, 1.0],
    "seed": 5,
}


@pytest.fixture(scope="session")
def tiny_cfg() -> ExperimentConfig:
    return ExperimentConfig.from_dict(TINY_CONFIG)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cfg):
    return load_images(tiny_cfg)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg, tiny_dataset):
    return train_model(tiny_cfg, tiny_dataset.images)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, tiny_model):
    path = tmp_path_factory.mktemp("ckpt") / "checkpoint.bin"
    tiny_model.save(path)
    return path


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path
