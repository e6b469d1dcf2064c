import numpy as np
import pytest

from conmoe import ModelSpec, gen_synthetic, gen_tokens, run_calibration


@pytest.fixture(scope="session")
def small_spec():
    return ModelSpec(num_layers=4, num_experts=8, hidden_dim=16, intermediate_dim=24, top_k=2)


@pytest.fixture(scope="session")
def small_model(small_spec):
    model, _ = gen_synthetic(small_spec, seed=7)
    return model


@pytest.fixture(scope="session")
def small_tokens(small_spec):
    return gen_tokens(32, small_spec.hidden_dim, seed=3)


@pytest.fixture(scope="session")
def small_stats(small_model, small_tokens):
    return run_calibration(small_model, small_tokens)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
