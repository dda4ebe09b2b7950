import numpy as np
import pytest

from neglab import corpus
from neglab.model import ModelConfig, Transformer
from neglab.model.toy import init_weights, load_toy


@pytest.fixture(scope="session")
def toy():
    return load_toy()


@pytest.fixture(scope="session")
def model(toy):
    return toy[0]


@pytest.fixture(scope="session")
def tok(toy):
    return toy[1]


@pytest.fixture(scope="session")
def entries(tok):
    return corpus.load_seed_corpus(tok)


@pytest.fixture(scope="session")
def rng_prompts(model):
    """100 seeded random prompts of length 1..24 over the toy vocabulary."""
    rng = np.random.default_rng(7)
    V = model.config.vocab_size
    return [rng.integers(0, V, size=int(rng.integers(1, 25))).tolist() for _ in range(100)]


def tiny_model(**overrides) -> Transformer:
    cfg = dict(n_layers=2, d_model=16, n_heads=4, d_head=4, vocab_size=50, mlp_hidden=32, n_ctx=64)
    cfg.update(overrides)
    config = ModelConfig(**cfg)
    return Transformer(init_weights(config, seed=3, std=0.2))
