import copy
import numpy as np
import pytest
import torch
from torch import nn
from stylemlm import AttributionMethod, Attributor, IncompatibleModelError, DiversityLstmModel, atm, conicity, attribute, \
    train_diversity_lstm
from stylemlm.attribution import AttributionVector, conicity_torch, vanilla_gradients, gradients_times_input, integrated_gradients_batch, \
    attribute_batch
from tests.conftest import ATTR_CONFIG
import logging
logger = logging.getLogger('stylemlm')
logger.setLevel(logging.INFO)


def _brute_conicity(V):
    mean = [sum(v[j] for v in V) / len(V) for j in range(len(V[0]))]
    norm_mean = sum(x * x for x in mean) ** .5
    cos = []
    for v in V:
        norm_v = sum(x * x for x in v) ** .5
        cos.append(sum(a * b for a, b in zip(v, mean)) / (norm_v * norm_mean))
    return sum(cos) / len(cos)


def test_conicity():
    assert conicity([[1., 2., 3.]] * 4) == pytest.approx(1.0, abs=1e-12), 'identical vectors are perfectly aligned'
    assert conicity([[1., 0.], [0., 1.]]) == pytest.approx(0.70711, abs=1e-5)
    assert atm([1., 0.], [[1., 0.], [0., 1.]]) == pytest.approx(0.70711, abs=1e-5)
    rng = np.random.default_rng(0)
    for _ in range(20):
        V = rng.normal(size=(5, 8))
        assert conicity(V) == pytest.approx(_brute_conicity(V.tolist()), abs=1e-8)
        assert np.mean([atm(v, V) for v in V]) == pytest.approx(conicity(V), abs=1e-12)
    assert conicity(np.zeros((3, 4))) == 0.0, 'zero mean vector'


def test_conicity_torch():
    rng = np.random.default_rng(1)
    V = rng.normal(size=(2, 6, 5))
    mask = torch.tensor([[True] * 6, [True] * 4 + [False] * 2])
    con = conicity_torch(torch.tensor(V), mask).numpy()
    assert con[0] == pytest.approx(conicity(V[0]), abs=1e-10)
    assert con[1] == pytest.approx(conicity(V[1, :4]), abs=1e-10), 'padding must not contribute'


def test_method_names():
    assert AttributionMethod('explainable_attention').tag == 'EA'
    assert AttributionMethod('GxX').name == 'gradients_times_input'
    with pytest.raises(ValueError):
        AttributionMethod('LIME')
    with pytest.raises(ValueError):
        AttributionMethod('IG', ig_steps=0)
    with pytest.raises(ValueError):
        AttributionMethod('IG', ig_baseline='mean')


@pytest.mark.dependency()
def test_train(ea_model, va_model):
    assert ea_model.is_diversity_trained and not va_model.is_diversity_trained
    for model in (ea_model, va_model):
        assert len(model.history) == ATTR_CONFIG.epochs
        assert model.metrics['dev_accuracy'] >= 0.95
        assert np.isfinite(model.history['loss']).all()


@pytest.mark.dependency(depends=['test_train'])
def test_diversity_effect(toy_corpus, vocab):
    con = {}
    for lambda_con in (10.0, 0.0):
        runs = [train_diversity_lstm(toy_corpus, lambda_con, ATTR_CONFIG.epochs, seed, vocab, ATTR_CONFIG) for seed in range(3)]
        for model in runs:
            assert model.metrics['dev_accuracy'] >= 0.95, f'dev accuracy too low with lambda_con={lambda_con}'
        con[lambda_con] = np.mean([model.metrics['conicity'] for model in runs])
    assert con[10.0] < con[0.0], f'conicity loss should reduce the conicity of the hidden states ({con})'


@pytest.mark.dependency(depends=['test_train'])
def test_attention_scores(ea_model, va_model, toy_corpus):
    sentences = toy_corpus['test'][:50]
    for tag, model in (('EA', ea_model), ('VA', va_model)):
        for ex in sentences:
            vec = attribute(tag, model, ex)
            assert vec.method == tag
            assert len(vec) == len(ex)
            assert vec.scores.min() >= 0 and vec.scores.sum() == pytest.approx(1.0)
    batched = attribute_batch('EA', ea_model, sentences, batch_size=7)
    for ex, vec in zip(sentences, batched):
        assert np.allclose(vec.scores, attribute('EA', ea_model, ex).scores, atol=1e-6), 'padding must not change the attention'


@pytest.mark.dependency(depends=['test_train'])
def test_incompatible(ea_model, va_model, toy_corpus, caplog):
    with pytest.raises(IncompatibleModelError):
        attribute('EA', va_model, toy_corpus['test'][0])
    with pytest.raises(IncompatibleModelError):
        Attributor('EA', va_model)
    with caplog.at_level(logging.WARNING, logger='stylemlm'):
        vec = attribute('VA', ea_model, toy_corpus['test'][0])
    assert vec.method == 'VA'
    assert 'vanilla attention requested from a diversity trained model' in caplog.text


def _finite_difference_grad(model, sentence, h=1e-6):
    '''central finite differences of the predicted class logit w.r.t. every embedding coordinate'''
    ids = torch.tensor([model.encode(sentence)])
    mask = torch.ones_like(ids, dtype=torch.bool)
    with torch.no_grad():
        emb = model.embed(ids)[0]
        target = model.logits_from_embedded(emb[None], mask).argmax(-1).item()
        n, D = emb.shape
        eye = torch.eye(n * D, dtype=emb.dtype).reshape(n * D, n, D)
        plus = model.logits_from_embedded(emb[None] + h * eye, mask.expand(n * D, n))[:, target]
        minus = model.logits_from_embedded(emb[None] - h * eye, mask.expand(n * D, n))[:, target]
    return ((plus - minus) / (2 * h)).reshape(n, D).numpy(), emb.numpy()


@pytest.mark.dependency(depends=['test_train'])
def test_gradient_correctness(ea_model, toy_corpus):
    model = copy.deepcopy(ea_model)
    model.net.double()
    for ex in toy_corpus['test'][:20]:
        grad, emb = _finite_difference_grad(model, ex)
        vg = vanilla_gradients(model, ex)
        gxx = gradients_times_input(model, ex)
        np.testing.assert_allclose(vg.raw, np.linalg.norm(grad, axis=1), rtol=1e-3, atol=1e-8)
        np.testing.assert_allclose(gxx.raw, (grad * emb).sum(1), rtol=1e-3, atol=1e-8)
        assert vg.scores.sum() == pytest.approx(1.0) and gxx.scores.sum() == pytest.approx(1.0)


@pytest.mark.dependency(depends=['test_train'])
def test_ig_completeness(ea_model, toy_corpus):
    model = copy.deepcopy(ea_model)
    model.net.double()
    sentences = toy_corpus['test'][:20]
    for ex, vec in zip(sentences, integrated_gradients_batch(model, sentences, steps=50)):
        ids = torch.tensor([model.encode(ex)])
        mask = torch.ones_like(ids, dtype=torch.bool)
        with torch.no_grad():
            emb = model.embed(ids)
            logits = model.logits_from_embedded(emb, mask)[0]
            target = logits.argmax().item()
            diff = (logits[target] - model.logits_from_embedded(torch.zeros_like(emb), mask)[0, target]).item()
        assert vec.raw.sum() == pytest.approx(diff, rel=0.01), f'integrated gradients of "{ex.sentence}" miss completeness'
        assert vec.completeness_gap <= 0.01 * abs(diff)


class LinearScorer:
    '''bag of embeddings with a linear read out; integrated gradients are exact for it'''

    def __init__(self, vocab_size=20, dim=6, n_classes=2, seed=0):
        gen = torch.Generator().manual_seed(seed)
        self.embedding = nn.Embedding(vocab_size, dim)
        with torch.no_grad():
            self.embedding.weight.copy_(torch.randn(vocab_size, dim, generator=gen))
        self.W = torch.randn(dim, n_classes, generator=gen)

    def encode(self, sentence):
        return [int(tok) for tok in sentence.split()]

    def embed(self, ids):
        return self.embedding(ids)

    def logits_from_embedded(self, emb, mask):
        return (emb * mask.unsqueeze(-1)).sum(1) @ self.W


def test_ig_linear_scorer():
    scorer = LinearScorer()
    sentences = ['1 2 3', '4 5 6 7 8', '9', '10 11 12 13']
    for sentence, vec in zip(sentences, integrated_gradients_batch(scorer, sentences, steps=3)):
        ids = torch.tensor([scorer.encode(sentence)])
        with torch.no_grad():
            logits = scorer.logits_from_embedded(scorer.embed(ids), torch.ones_like(ids, dtype=torch.bool))[0]
        assert vec.raw.sum() == pytest.approx(logits.max().item(), abs=1e-5), 'zero baseline has zero logits'
        assert vec.completeness_gap == pytest.approx(0, abs=1e-5)
        # gradient times input is exact for the linear scorer, too
        assert np.allclose(vec.raw, gradients_times_input(scorer, sentence).raw, atol=1e-5)


class ConstantModel:
    '''logits independent of the input'''

    def __init__(self):
        self.embedding = nn.Embedding(10, 4)
        self.bias = nn.Parameter(torch.tensor([0., 1.]))

    def encode(self, sentence):
        return [int(tok) for tok in sentence.split()]

    def embed(self, ids):
        return self.embedding(ids)

    def logits_from_embedded(self, emb, mask):
        return self.bias.expand(len(emb), 2)


def test_zero_mass(caplog):
    with caplog.at_level(logging.WARNING, logger='stylemlm'):
        vec = vanilla_gradients(ConstantModel(), '1 2 3 4')
    assert vec.flagged
    assert np.allclose(vec.scores, .25)
    assert 'zero mass' in caplog.text


def test_attribution_vector():
    with pytest.raises(AssertionError):
        AttributionVector([.5, .6], 'EA')
    with pytest.raises(AssertionError):
        AttributionVector([-.5, 1.5], 'EA')


@pytest.mark.dependency(depends=['test_train'])
def test_save_load(tmp_path, ea_model, toy_corpus):
    ea_model.save(tmp_path / 'attr')
    loaded = DiversityLstmModel.load(tmp_path / 'attr')
    assert loaded.lambda_con == ea_model.lambda_con
    assert loaded.vocab == ea_model.vocab
    sentences = toy_corpus['test'][:10]
    for a, b in zip(attribute_batch('EA', ea_model, sentences), attribute_batch('EA', loaded, sentences)):
        assert np.allclose(a.scores, b.scores)
