import copy
import dataclasses
import numpy as np
import pytest
import torch
from stylemlm import SmlmConfig, ControlCodes, TrainingError, IncompatibleModelError, Attributor, build_smlm, smlm_forward, finetune, \
    tst_percent, s_bleu
from stylemlm.attribution import AttributionVector
from stylemlm.corpus import Vocabulary
from stylemlm.smlm import smlm_forward_batch, transfer_batch, save_smlm, load_smlm, build_head, _decode_positions, _check_model
from stylemlm._utils import check_finite
from tests.conftest import SMLM_CONFIG, LAMBDA_EPS
import logging
logger = logging.getLogger('stylemlm')
logger.setLevel(logging.INFO)


def _other(corpus, label):
    return next(lab for lab in corpus.labels if lab != label)


def test_config():
    with pytest.raises(ValueError):
        SmlmConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        SmlmConfig(loss_on='some')
    with pytest.raises(ValueError):
        SmlmConfig.from_dict({'dim': 64, 'depth': 3})
    assert SmlmConfig().clip == 1e-3 and SmlmConfig().bootstrap_epochs == 15


def test_build(vocab):
    m1, m2 = build_smlm(SMLM_CONFIG, vocab), build_smlm(SMLM_CONFIG, vocab)
    for (k, a), (_, b) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), f'initialization of {k} is not deterministic'
    assert m1.n_parameters == sum(p.numel() for p in m2.parameters())
    with pytest.raises(IncompatibleModelError):
        build_smlm(SMLM_CONFIG, Vocabulary(['a'], 1))


def test_forward_shapes(vocab, masked):
    model = build_smlm(SMLM_CONFIG, vocab)
    m = masked['test'][0]
    codes = ControlCodes(m.source_style, m.source_style)
    probs = smlm_forward(model, m, codes)
    assert probs.shape == (len(m), len(vocab))
    assert np.allclose(probs.sum(1), 1)
    ids = torch.zeros((1, SMLM_CONFIG.max_len + 1), dtype=torch.long)
    with pytest.raises(ValueError):
        model(ids, torch.ones_like(ids, dtype=torch.bool), torch.tensor([0]), torch.tensor([0]))
    ids = ids[:, :4]
    with pytest.raises(ValueError):
        model(ids, torch.ones_like(ids, dtype=torch.bool), torch.tensor([0]), torch.tensor([2]))


def test_padding_invariance(bootstrapped, masked):
    batch = masked['test'][:8]
    codes = [ControlCodes(m.source_style, m.source_style) for m in batch]
    for m, c, probs in zip(batch, codes, smlm_forward_batch(bootstrapped, batch, codes)):
        assert np.allclose(probs, smlm_forward(bootstrapped, m, c), atol=1e-5), 'padding must not change the predictions'


@pytest.mark.dependency()
def test_bootstrap(bootstrapped, masked):
    assert len(bootstrapped.history) == SMLM_CONFIG.bootstrap_epochs
    assert bootstrapped.history[-1]['loss'] < bootstrapped.history[0]['loss']
    held_out = masked['test']
    codes = [ControlCodes(m.source_style, m.source_style) for m in held_out]
    correct_masked, n_masked, correct_unmasked, n_unmasked = 0, 0, 0, 0
    for m, probs in zip(held_out, smlm_forward_batch(bootstrapped, held_out, codes)):
        pred = probs.argmax(-1)
        target = [bootstrapped.vocab[tok] for tok in m.original.tokens]
        for i, (p, t) in enumerate(zip(pred, target)):
            if i in m.mask_positions:
                correct_masked += p == t
                n_masked += 1
            else:
                correct_unmasked += p == t
                n_unmasked += 1
    logger.info('held out reconstruction: masked accuracy %.3f, unmasked accuracy %.3f', correct_masked / n_masked, correct_unmasked / n_unmasked)
    assert correct_masked / n_masked >= 0.8
    assert correct_unmasked / n_unmasked >= 0.99


@pytest.mark.dependency(depends=['test_bootstrap'])
def test_control_codes(finetuned, masked, toy_corpus):
    model, _ = finetuned
    m = next(m for m in masked['test'] if m.n_masked)
    other = ControlCodes(m.source_style, _other(toy_corpus, m.source_style))
    same = smlm_forward(model, m, ControlCodes(m.source_style, m.source_style))
    transfer = smlm_forward(model, m, other)
    pos = sorted(m.mask_positions)
    assert np.abs(same[pos] - transfer[pos]).max() > 1e-3, 'the destination code must change the masked predictions'


@pytest.mark.dependency(depends=['test_bootstrap'])
def test_finetune_direction(bootstrapped, finetuned, ea_model, eval_clf, toy_corpus):
    model, head = finetuned
    assert check_finite(model) and check_finite(head)
    assert model.history[-1]['phase'] == 'finetune'
    examples = list(toy_corpus['test'])
    dsts = [_other(toy_corpus, ex.label) for ex in examples]
    attributor = Attributor('EA', ea_model)
    tst, bleu = {}, {}
    for name, m in (('bootstrap', bootstrapped), ('finetuned', model)):
        results = transfer_batch(m, examples, attributor, LAMBDA_EPS, dsts)
        tst[name] = tst_percent(eval_clf, [r.output for r in results], dsts)
        bleu[name] = s_bleu([r.output for r in results], [ex.tokens for ex in examples])
    logger.info('TST%%: %s, s-BLEU: %s', tst, bleu)
    if tst['bootstrap'] <= 80:
        assert tst['finetuned'] - tst['bootstrap'] >= 20, f'fine-tuning should raise the target style accuracy ({tst})'
    else:
        assert tst['finetuned'] >= 90
    assert bleu['finetuned'] >= 50


@pytest.mark.dependency(depends=['test_bootstrap'])
def test_transfer_invariants(finetuned, ea_model, toy_corpus):
    model, _ = finetuned
    examples = [ex for split in ('train', 'dev', 'test') for ex in toy_corpus[split]][:1000]
    assert len(examples) == 1000
    dsts = [_other(toy_corpus, ex.label) for ex in examples]
    for res in transfer_batch(model, examples, Attributor('EA', ea_model), LAMBDA_EPS, dsts):
        assert len(res.output) == len(res.source)
        changed = {i for i, (a, b) in enumerate(zip(res.source.tokens, res.output)) if a != b}
        assert changed <= res.masked.mask_positions
        assert not any(tok.startswith('<') and tok.endswith('>') for tok in res.output), 'reserved tokens must not be produced'


def _uniform(batch):
    return [AttributionVector(np.full(len(ex), 1 / len(ex)), 'EA') for ex in batch]


@pytest.mark.dependency(depends=['test_bootstrap'])
def test_identity(bootstrapped, toy_corpus):
    examples = toy_corpus['test'][:20]
    # nothing reaches the threshold with uniform scores and lambda_eps > 0
    for res in transfer_batch(bootstrapped, examples, _uniform, 1.0, [_other(toy_corpus, ex.label) for ex in examples]):
        assert res.masked.n_masked == 0
        assert res.output == res.source.tokens


@pytest.mark.dependency(depends=['test_bootstrap'])
def test_redecode(bootstrapped, masked, toy_corpus):
    m = masked['test'][0]
    probs = smlm_forward(bootstrapped, m, ControlCodes(m.source_style, m.source_style))
    out = _decode_positions(bootstrapped, probs, m, copy_through=False)
    assert len(out) == len(m)
    results = transfer_batch(bootstrapped, toy_corpus['test'][:10], _uniform, 0.0, toy_corpus.labels[0], copy_through=False)
    for res in results:
        assert len(res.output) == len(res.source)


@pytest.mark.dependency(depends=['test_bootstrap'])
def test_save_load(tmp_path, finetuned, masked):
    model, head = finetuned
    save_smlm(model, tmp_path / 'smlm', head)
    loaded, loaded_head = load_smlm(tmp_path / 'smlm')
    assert loaded_head is not None
    assert loaded.history == model.history
    batch = masked['test'][:5]
    codes = [ControlCodes(m.source_style, m.source_style) for m in batch]
    for a, b in zip(smlm_forward_batch(model, batch, codes), smlm_forward_batch(loaded, batch, codes)):
        assert np.allclose(a, b)


@pytest.mark.dependency(depends=['test_bootstrap'])
def test_no_adversarial_term(bootstrapped, masked):
    config = dataclasses.replace(SMLM_CONFIG, lambda_sta=0.0)
    model, _ = finetune(copy.deepcopy(bootstrapped), None, masked['train'][:64], config)
    assert model.history[-1]['adversarial_loss'] == 0
    assert check_finite(model)


@pytest.mark.dependency(depends=['test_bootstrap'])
def test_divergence(tmp_path, bootstrapped, masked):
    config = dataclasses.replace(SMLM_CONFIG, lr=1e30)
    with pytest.raises(TrainingError) as e:
        finetune(copy.deepcopy(bootstrapped), None, masked['train'], config, checkpoint_dir=tmp_path / 'last-good')
    assert e.value.checkpoint is not None, 'the last finite state should be saved'
    model, head = load_smlm(e.value.checkpoint)
    assert check_finite(model) and check_finite(head)
    broken = copy.deepcopy(bootstrapped)
    with torch.no_grad():
        next(broken.parameters()).fill_(float('nan'))
    with pytest.raises(TrainingError):
        finetune(broken, None, masked['train'][:16])


@pytest.mark.dependency(depends=['test_bootstrap'])
def test_non_finite_parameters(tmp_path, bootstrapped):
    model = copy.deepcopy(bootstrapped)
    head = build_head(model)
    last_good = (copy.deepcopy(model.state_dict()), copy.deepcopy(head.state_dict()))
    with torch.no_grad():
        next(model.parameters()).fill_(float('nan'))
        next(head.parameters()).fill_(float('nan'))
    with pytest.raises(TrainingError) as e:
        _check_model(model, 1, 3, head, last_good, tmp_path / 'last-good')
    assert e.value.step == 3 and e.value.checkpoint is not None
    assert check_finite(model) and check_finite(head), 'the last finite state is restored'
    loaded, loaded_head = load_smlm(e.value.checkpoint)
    assert loaded_head is not None
    assert check_finite(loaded) and check_finite(loaded_head)
    for k, v in loaded_head.state_dict().items():
        assert torch.equal(v, last_good[1][k])
