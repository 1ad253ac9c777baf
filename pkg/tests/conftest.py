import copy
import os
import pytest
from stylemlm import ToyCorpusSpec, generate_toy_corpus, build_vocab, train_diversity_lstm, Attributor, mask_corpus, \
    SmlmConfig, build_smlm, bootstrap_train, finetune, train_eval_classifier
from stylemlm.attribution import DiversityLstmConfig
from stylemlm.evaluation import EvalClassifierConfig

DATA_DIR = os.path.join(os.path.dirname(__file__), 'data')
TOY_SPEC = os.path.join(DATA_DIR, 'toy_spec.yaml')

ATTR_CONFIG = DiversityLstmConfig(epochs=8, hidden_size=64, embedding_dim=64)
SMLM_CONFIG = SmlmConfig(layers=2, heads=4, dim=64, ff_dim=128, dropout=0.0, max_len=16, bootstrap_epochs=15, finetune_epochs=1,
                         lr=1e-3, batch_size=16, seed=0)
LAMBDA_EPS = 0.15


@pytest.fixture(scope="session")
def toy_spec():
    return ToyCorpusSpec.from_yaml(TOY_SPEC)


@pytest.fixture(scope="session")
def toy(toy_spec):
    return generate_toy_corpus(toy_spec)


@pytest.fixture(scope="session")
def toy_corpus(toy):
    return toy[0]


@pytest.fixture(scope="session")
def planted(toy):
    return toy[1]


@pytest.fixture(scope="session")
def vocab(toy_corpus):
    return build_vocab(toy_corpus, min_freq=2)


@pytest.fixture(scope="session")
def ea_model(toy_corpus, vocab):
    return train_diversity_lstm(toy_corpus, lambda_con=10.0, epochs=ATTR_CONFIG.epochs, seed=0, vocab=vocab, config=ATTR_CONFIG)


@pytest.fixture(scope="session")
def va_model(toy_corpus, vocab):
    return train_diversity_lstm(toy_corpus, lambda_con=0.0, epochs=ATTR_CONFIG.epochs, seed=0, vocab=vocab, config=ATTR_CONFIG)


@pytest.fixture(scope="session")
def eval_clf(toy_corpus):
    return train_eval_classifier(toy_corpus, seed=0, config=EvalClassifierConfig(epochs=3, hidden_size=64, embedding_dim=64))


@pytest.fixture(scope="session")
def masked(toy_corpus, ea_model):
    '''EA masked splits of the toy corpus'''
    attributor = Attributor('EA', ea_model)
    return {split: mask_corpus(toy_corpus, attributor, LAMBDA_EPS, split=split) for split in ('train', 'dev', 'test')}


@pytest.fixture(scope="session")
def bootstrapped(vocab, masked):
    model = build_smlm(SMLM_CONFIG, vocab)
    return bootstrap_train(model, masked['train'])


@pytest.fixture(scope="session")
def finetuned(bootstrapped, masked):
    return finetune(copy.deepcopy(bootstrapped), None, masked['train'])
