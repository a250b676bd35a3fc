import numpy as np
import pytest

from pmlm.corpus import pack_pair
from pmlm.verification import toy_vocab


@pytest.fixture
def vocab():
    return toy_vocab(32)


@pytest.fixture
def six(vocab):
    """x1..x6 at packed positions 1..6 behind [SOS] at 0."""
    words = list(range(vocab.first_regular_id, vocab.first_regular_id + 6))
    return pack_pair(words, [], 9, vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
