import numpy as np
import pytest

from kvq.evaluate import encode_bytes, train_model
from kvq.model import Model, ModelConfig, spread_kv_channels

WORDS = [b"the ", b"quick ", b"brown ", b"fox ", b"jumps ", b"over ", b"a ", b"dog. "]


def tiny_config(**kw) -> ModelConfig:
    defaults = dict(
        n_layers=2,
        hidden_size=32,
        n_heads=2,
        head_dim=16,
        intermediate_size=48,
        max_seq_len=64,
        kv_group_size=8,
        weight_group_size=16,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


def word_corpus(seed: int, n_words: int = 1000) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return encode_bytes(b"".join(WORDS[i] for i in rng.integers(0, 8, size=n_words)))


def fitted_model(seed: int, steps: int = 100, spread: float = 0.0, **cfg_kw):
    """A small model briefly trained on the word corpus for that seed."""
    model = Model.random(tiny_config(**cfg_kw), seed=seed)
    corpus = word_corpus(seed)
    train_model(model, corpus, steps=steps, batch=2, seq_len=32, lr=3e-3, seed=seed)
    if spread:
        spread_kv_channels(model, log_range=spread, seed=seed)
    return model, corpus


@pytest.fixture(scope="session")
def trained_pair():
    return fitted_model(0)
