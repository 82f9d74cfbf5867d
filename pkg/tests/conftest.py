import pytest

from mixpretrain import corpus as C
from mixpretrain import load_bundled_lexicon


@pytest.fixture(scope="session")
def lexicon():
    return load_bundled_lexicon()


@pytest.fixture(scope="session")
def small_corpus():
    # no hidden objects: labels are exhaustive over rendered content
    return C.synth_corpus(seed=11, n_images=60, hidden_rate=0.0)


@pytest.fixture(scope="session")
def hidden_corpus():
    return C.synth_corpus(seed=13, n_images=60, hidden_rate=0.3)
