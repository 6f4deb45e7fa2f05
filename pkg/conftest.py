import numpy as np
import pytest

import tensor_core
from config import EncoderConfig, GateConfig, LossConfig, ModelConfig, SceneSpec
from pipeline import GateDapModel
from synthetic_data import generate_dataset, generate_synthetic_clip


@pytest.fixture(autouse=True)
def float64_tensors():
    with tensor_core.default_dtype("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """16×16 frames, patch 4, one encoder block, two input frames."""
    return ModelConfig(
        encoder=EncoderConfig(image_size=16, patch_size=4, embed_dim=8, depth=1, num_heads=2, mlp_ratio=2.0),
        clip_len=2,
        gru_input=8,
        gru_hidden=8,
        memory_channels=2,
        decoder_width=4,
        spag_kernel=3,
    )


@pytest.fixture
def tiny_model(tiny_model_config):
    return GateDapModel(tiny_model_config, seed=7)


@pytest.fixture
def tiny_scene():
    return SceneSpec(seed=3, image_size=16, clip_len=2, vehicles=(1, 2), pedestrians=(1, 1), sigma_g=2.0,
                     sudden_event_prob=0.0)


@pytest.fixture
def tiny_clip(tiny_scene):
    return generate_synthetic_clip(tiny_scene, clip_id="0000")


@pytest.fixture
def tiny_clips(tiny_scene):
    return generate_dataset(tiny_scene, 3)


@pytest.fixture
def loss_config():
    return LossConfig(alpha=0.1, beta=0.1)


@pytest.fixture
def all_closed():
    return GateConfig(spag=False, memog=False, mu_infog=False)
