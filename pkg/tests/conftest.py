import numpy as np
import pytest

from d2f.model import ModelConfig, init_params


def tiny_config(dtype="float64", **kw):
    base = dict(vocab_size=16, dim=32, layers=2, heads=4, max_seq_len=32, mask_token_id=15, eos_token_id=14, dtype=dtype)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny64():
    return init_params(tiny_config("float64"), seed=0)


@pytest.fixture
def tiny32():
    return init_params(tiny_config("float32"), seed=0)


def random_tokens(rng, n, vocab=14):
    return rng.integers(0, vocab, size=n)
