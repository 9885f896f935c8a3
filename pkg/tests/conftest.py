import numpy as np
import pytest

from effortstudio.diffcore import RngStream
from effortstudio.model import Model, ModelConfig, init_params, new_model


def tiny_config(**overrides) -> ModelConfig:
    base = dict(seq_len=6, n_joints=2, k=3, latent_dim=4,
                enc_layers=1, enc_width=8, dec_layers=1, dec_width=8,
                classifier_hidden=(8,))
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model() -> Model:
    return new_model(tiny_config(), seed=11)


def random_sequence_array(config: ModelConfig, seed: int = 0) -> np.ndarray:
    rng = RngStream(seed)
    return 0.5 + 0.2 * rng.normal((config.seq_len, config.n_joints, 3))


def zero_weight_model(config: ModelConfig) -> Model:
    model = new_model(config, seed=3)
    for p in model.params.values():
        p.values[:] = 0.0
    return model
