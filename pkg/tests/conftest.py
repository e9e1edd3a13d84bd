import numpy as np
import pytest

from xmdistill.models import ModelConfig
from xmdistill.scenegen import SceneSpec, generate_scene
from xmdistill.training import DistillConfig, build_scene_pack


@pytest.fixture(scope="session")
def scene_spec():
    return SceneSpec()


@pytest.fixture(scope="session")
def model_cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def train_samples(scene_spec):
    return [generate_scene(scene_spec, s) for s in range(16)]


@pytest.fixture(scope="session")
def val_samples(scene_spec):
    return [generate_scene(scene_spec, s) for s in range(64, 72)]


@pytest.fixture(scope="session")
def train_packs(train_samples, model_cfg):
    return [build_scene_pack(s, model_cfg) for s in train_samples]


@pytest.fixture(scope="session")
def val_packs(val_samples, model_cfg):
    return [build_scene_pack(s, model_cfg) for s in val_samples]


@pytest.fixture(scope="session")
def quick_cfg():
    """Small schedules for trainer unit tests; not the experiment defaults."""
    return DistillConfig(seed=0, pretrain_epochs=4, udakd_epochs=5,
                         fskd_epochs=3, finetune_epochs=4, batch_size=4)
