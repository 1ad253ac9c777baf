import numpy as np
import pytest
from stylemlm import Attributor, MaskPolicyConfig, StyleMaskedSentence, LabeledExample, StyleLabel, CorpusFormatError, compute_baseline, \
    attention_surplus_mask, apply_mask, mask_corpus
from stylemlm.attribution import AttributionVector
from stylemlm.masking import mask_rate, write_masked, read_masked, pad_scores
from stylemlm.evaluation import masking_f1
import logging
logger = logging.getLogger('stylemlm')
logger.setLevel(logging.INFO)

POSITIVE = StyleLabel(1, 'positive')
GRID = (0.0, 0.15, 0.3, 0.5, 1.0)


def test_baseline():
    assert compute_baseline(4, 0) == pytest.approx(0.25)
    assert compute_baseline(4, 0.15) == pytest.approx(0.2875)
    assert compute_baseline(10, 0.5) == pytest.approx(0.15)
    assert np.allclose(compute_baseline(np.array([2, 4]), 0), [.5, .25])
    with pytest.raises(ValueError):
        compute_baseline(0, 0.15)


def test_policy_config():
    assert MaskPolicyConfig.default_for('EA').lambda_eps == 0.15
    assert MaskPolicyConfig.default_for('VA', pair_corpus=True).lambda_eps == 0.5
    assert MaskPolicyConfig.default_for('IG').lambda_eps == 0.0
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            MaskPolicyConfig(bad)


def test_surplus_examples():
    assert attention_surplus_mask([0.4, 0.1, 0.1, 0.4], 0.15).tolist() == [True, False, False, True]
    assert attention_surplus_mask([0.7, 0.1, 0.1, 0.1], 1.0).tolist() == [True, False, False, False]
    assert attention_surplus_mask([0.25] * 4, 0.0).all(), 'uniform scores are masked completely at lambda_eps=0'
    assert not attention_surplus_mask([0.25] * 4, 0.15).any()
    assert attention_surplus_mask([1.0], 0.0).all()
    assert not attention_surplus_mask([1.0], 0.15).any(), 'a single token needs a score above 1 for lambda_eps > 0'
    assert attention_surplus_mask(AttributionVector([.5, .5], 'EA'), 0.0).all()


def _hand_mask(scores, lambda_eps):
    n = len(scores)
    return [a >= (1 + lambda_eps) / n for a in scores]


def test_surplus_suite():
    rng = np.random.default_rng(0)
    cases = [([0.4, 0.1, 0.1, 0.4], 0.15), ([0.7, 0.1, 0.1, 0.1], 1.0), ([0.25] * 4, 0.0), ([1 / 3] * 3, 0.0), ([1.0], 0.5),
             ([0.5, 0.5], 0.0), ([0.6, 0.4], 0.15), ([0.6, 0.4], 0.3), ([0.9, 0.05, 0.05], 1.0), ([0.2] * 5, 1.0)]
    while len(cases) < 50:
        n = int(rng.integers(1, 25))
        cases.append((rng.dirichlet(np.ones(n) * rng.choice([.1, 1, 10])).tolist(), float(rng.choice(GRID))))
    for scores, lambda_eps in cases:
        assert attention_surplus_mask(scores, lambda_eps).tolist() == _hand_mask(scores, lambda_eps), f'{scores} at {lambda_eps}'
    # the same cases in one padded batch
    for lambda_eps in GRID:
        batch = [s for s, _ in cases]
        padded, lengths = pad_scores(batch)
        masks = attention_surplus_mask(padded, lambda_eps, lengths)
        for scores, m, n in zip(batch, masks, lengths):
            assert m[:n].tolist() == _hand_mask(scores, lambda_eps)
            assert not m[n:].any(), 'padding is never masked'


def test_monotonicity():
    rng = np.random.default_rng(1)
    vectors = [rng.dirichlet(np.ones(int(rng.integers(1, 30)))) for _ in range(1000)]
    padded, lengths = pad_scores(vectors)
    masks = [attention_surplus_mask(padded, lambda_eps, lengths) for lambda_eps in GRID]
    for smaller, larger in zip(masks, masks[1:]):
        assert not (larger & ~smaller).any(), 'a larger lambda_eps must not mask additional tokens'


def test_apply_mask():
    ex = LabeledExample("this movie is by far one of the best urban crime dramas i 've seen .".split(), POSITIVE)
    mask = np.zeros(len(ex), dtype=bool)
    mask[[4, 8, 11]] = True
    masked = apply_mask(ex, mask)
    assert masked.sentence == "this movie is by <mask> one of the <mask> urban crime <mask> i 've seen ."
    assert masked.mask_positions == {4, 8, 11}
    assert masked.source_style == POSITIVE and masked.n_masked == 3
    with pytest.raises(ValueError):
        apply_mask(ex, mask[:-1])
    with pytest.raises(AssertionError):
        StyleMaskedSentence(ex.tokens, {0}, ex)


def test_no_style_tokens():
    ex = LabeledExample('a plain sentence'.split(), POSITIVE)
    masked = mask_corpus([ex], lambda batch: [AttributionVector(np.full(len(e), 1 / len(e)), 'EA') for e in batch], 0.15)
    assert masked[0].tokens == ex.tokens and masked[0].n_masked == 0


def test_single_token(caplog):
    ex = LabeledExample(['great'], POSITIVE)
    with caplog.at_level(logging.WARNING, logger='stylemlm'):
        masked = mask_corpus([ex], lambda batch: [AttributionVector([1.0], 'EA') for _ in batch], 0.15)
    assert masked[0].n_masked == 0
    assert 'single token sentences stay unmasked' in caplog.text


@pytest.mark.dependency()
def test_mask_toy(masked, toy_corpus):
    for split in ('train', 'dev', 'test'):
        assert len(masked[split]) == len(toy_corpus[split])
        for m, ex in zip(masked[split], toy_corpus[split]):
            assert m.original == ex and len(m) == len(ex)
    assert 0 < mask_rate(masked['train']) < 0.5


@pytest.mark.dependency(depends=['test_mask_toy'])
def test_planted_recovery(masked, planted):
    precision, recall, f1 = masking_f1(masked['test'], planted['test'])
    logger.info('planted style tokens: precision=%.3f recall=%.3f F1=%.3f', precision, recall, f1)
    assert recall >= 0.9
    assert precision >= 0.8


@pytest.mark.dependency(depends=['test_mask_toy'])
def test_masked_io(tmp_path, masked, toy_corpus):
    write_masked(masked['test'], tmp_path / 'test.tsv')
    assert read_masked(tmp_path / 'test.tsv', toy_corpus['test']) == masked['test']
    with pytest.raises(CorpusFormatError):
        read_masked(tmp_path / 'test.tsv', toy_corpus['dev'][:10])
    with open(tmp_path / 'test.tsv') as fh:
        labels = [line.split('\t')[0] for line in fh]
    assert labels == [str(ex.label.id) for ex in toy_corpus['test']], 'label ids as in the corpus files'


def test_mask_empty():
    def attributor(batch):
        raise AssertionError('no attributions are needed for an empty corpus')
    assert mask_corpus([], attributor, 0.15) == []
    assert mask_rate([]) == 0.0


@pytest.mark.dependency(depends=['test_mask_toy'])
def test_mask_toy_lambda(toy_corpus, ea_model):
    test = list(toy_corpus['test'])
    attributions = Attributor('EA', ea_model)(test)
    n_masked = {lambda_eps: sum(m.n_masked for m in mask_corpus(test, None, lambda_eps, attributions=attributions)) for lambda_eps in (0.15, 1.0)}
    assert n_masked[1.0] <= n_masked[0.15]
    assert n_masked[0.15] > 0
