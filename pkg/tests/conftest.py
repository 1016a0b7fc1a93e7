import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sdcw import data, model


@pytest.fixture(scope="session")
def desk_corpus():
    train, dev, test = data.synth_ner_corpus(1, 800)
    vocab = data.build_vocab(data.corpus_token_lists(train), 2000)
    return train, dev, test, vocab


@pytest.fixture(scope="session")
def trained_model(desk_corpus):
    """One fine-tuned desk model shared (read-only) across the suite."""
    train, _, _, vocab = desk_corpus
    m = model.init_model(model.desk_config(), seed=1)
    model.finetune(m, train, vocab, model.desk_train_spec(), seed=1)
    return m


@pytest.fixture()
def trained_clone(trained_model):
    return model.clone_model(trained_model)
