import numpy as np
import pytest

from config import PACKAGE_ROOT
from models import TrainConfig, WorldSpec
from services.synthworld_service import make_dataset
from services.text_processing_service import Lexicon, LexiconTagger


# -------------------------------------------------------------------------------------------------
# Shared fixtures
# -------------------------------------------------------------------------------------------------

@pytest.fixture(scope="session")
def lexicon():
    '''The shipped closed lexicon.'''
    return Lexicon.load(str(PACKAGE_ROOT / "data" / "lexicon.tsv"))


@pytest.fixture(scope="session")
def tagger(lexicon):
    return LexiconTagger(lexicon)


@pytest.fixture(scope="session")
def world():
    return WorldSpec()


@pytest.fixture(scope="module")
def small_dataset(world):
    '''40 scenes, seed 0: a few dozen training records plus 8 benchmark items.'''
    return make_dataset(world, 40, 0.05, seed=0)


@pytest.fixture
def tiny_config():
    return TrainConfig(epochs=2, batch_size=8, token_dim=8, embed_dim=8, seed=0, lr=5e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
