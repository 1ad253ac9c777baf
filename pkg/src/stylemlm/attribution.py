'''Token attribution for style classification.

The attribution model is a recurrent classifier with additive attention over its hidden states.
Trained with a conicity penalty on the hidden states (lambda_con > 0) its attention weights
are "explainable attention" (EA), trained without (lambda_con = 0) they are vanilla attention (VA).
In addition, vanilla gradients (VG), gradients times input (GxX) and integrated gradients (IG)
are computed with respect to the token embeddings of the same model.

Gradient based methods accept any model exposing

* ``encode(sentence) -> list of ids``
* ``embed(ids [B x T]) -> embeddings [B x T x D]``
* ``logits_from_embedded(embeddings, mask) -> logits [B x C]``
'''

import os
import time
import logging
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from .corpus import Corpus, LabeledExample, Vocabulary, build_vocab, encode
from ._utils import TrainingError, IncompatibleModelError, set_seed, make_generator, pad_sequences, batches, \
    atomic_torch_save, write_json, read_json
from . import __version__

logger = logging.getLogger('stylemlm')

EPS = 1e-8
CHECKPOINT_FORMAT = 1

ATTRIBUTION_METHODS = {'VA': 'vanilla_attention',
                       'EA': 'explainable_attention',
                       'VG': 'vanilla_gradients',
                       'GxX': 'gradients_times_input',
                       'IG': 'integrated_gradients'}
ATTENTION_METHODS = ('VA', 'EA')
GRADIENT_METHODS = ('VG', 'GxX', 'IG')


@dataclass(frozen=True)
class AttributionMethod:
    '''Attribution method with its settings.

    :param tag: Short ("EA") or long ("explainable_attention") method name.
    :param ig_steps: Number of Riemann steps for integrated gradients.
    :param ig_baseline: Baseline for integrated gradients, either "zero" (all-zero embedding) or "pad" (embedding of the pad token).'''
    tag: str
    ig_steps: int = 50
    ig_baseline: str = 'zero'

    def __post_init__(self):
        long_names = {v: k for k, v in ATTRIBUTION_METHODS.items()}
        tag = long_names.get(self.tag, self.tag)
        if tag not in ATTRIBUTION_METHODS:
            raise ValueError(f'unknown attribution method "{self.tag}", must be one of {", ".join(ATTRIBUTION_METHODS)}')
        object.__setattr__(self, 'tag', tag)
        if self.ig_steps < 1:
            raise ValueError(f'ig_steps must be >= 1, got {self.ig_steps}')
        if self.ig_baseline not in ('zero', 'pad'):
            raise ValueError(f'ig_baseline must be "zero" or "pad", got {self.ig_baseline}')

    @property
    def name(self):
        return ATTRIBUTION_METHODS[self.tag]


@dataclass
class AttributionVector:
    '''Per token attribution distribution of one sentence.

    :param scores: Non-negative scores summing to one, one per token.
    :param method: The method tag.
    :param flagged: Set if the method produced no attribution mass and the uniform distribution was returned.
    :param raw: Signed per token attributions before normalization (gradient based methods only).
    :param completeness_gap: For IG, the absolute difference between the summed raw attributions and f(x)-f(baseline).'''
    scores: np.ndarray
    method: str
    flagged: bool = False
    raw: Optional[np.ndarray] = None
    completeness_gap: Optional[float] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        assert self.scores.ndim == 1 and len(self.scores) > 0, 'attribution must be a non-empty vector'
        assert (self.scores >= 0).all(), 'attribution scores must be non-negative'
        assert abs(self.scores.sum() - 1) <= 1e-6, f'attribution scores must sum to 1, found {self.scores.sum()}'

    def __len__(self):
        return len(self.scores)


def normalize_scores(raw, method, signed=None, completeness_gap=None):
    '''Turns non-negative raw scores into an AttributionVector; zero mass yields the flagged uniform distribution.'''
    raw = np.asarray(raw, dtype=np.float64)
    total = raw.sum()
    if not np.isfinite(total) or total <= EPS:
        logger.warning('%s attribution has zero mass, returning uniform distribution', method)
        return AttributionVector(np.full(len(raw), 1 / len(raw)), method, True, signed, completeness_gap)
    scores = raw / total
    return AttributionVector(scores / scores.sum(), method, False, signed, completeness_gap)


# conicity of hidden states


def atm(v, V):
    '''Alignment to mean: cosine similarity of v and the mean of the vectors in V.

    Returns 0 if the mean has (near) zero norm.'''
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if len(V) == 0:
        raise ValueError('V must not be empty')
    v = np.asarray(v, dtype=np.float64)
    mean = V.mean(0)
    norm_mean, norm_v = np.linalg.norm(mean), np.linalg.norm(v)
    if norm_mean < EPS or norm_v < EPS:
        return 0.0
    return float(np.clip(v @ mean / (norm_v * norm_mean), -1, 1))


def conicity(V):
    '''Mean alignment to mean over all vectors in V.'''
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if len(V) == 0:
        raise ValueError('V must not be empty')
    mean = V.mean(0)
    norm_mean = np.linalg.norm(mean)
    if norm_mean < EPS:
        return 0.0
    norms = np.linalg.norm(V, axis=1)
    cos = np.where(norms < EPS, 0, V @ mean / np.maximum(norms, EPS) / norm_mean)
    return float(np.clip(cos.mean(), -1, 1))


def conicity_torch(H, mask):
    '''Differentiable conicity per sequence.

    :param H: hidden states [B x T x D]
    :param mask: boolean mask [B x T], True at real tokens
    :return: conicity per sequence [B]'''
    m = mask.unsqueeze(-1).to(H.dtype)
    lengths = m.sum(1).clamp(min=1)
    mean = (H * m).sum(1) / lengths
    norm_mean = mean.norm(dim=-1, keepdim=True)
    cos = (H * mean.unsqueeze(1)).sum(-1) / (H.norm(dim=-1) * norm_mean).clamp(min=EPS)
    cos = torch.where(norm_mean >= EPS, cos, torch.zeros_like(cos))
    return (cos * m.squeeze(-1)).sum(1) / lengths.squeeze(-1)


class DiversityLstm(nn.Module):
    '''LSTM classifier with additive attention over the hidden states.'''

    def __init__(self, vocab_size, n_classes, embedding_dim=128, hidden_size=128, pad_id=0):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embedding_dim, padding_idx=pad_id)
        self.lstm = nn.LSTM(embedding_dim, hidden_size, num_layers=1, batch_first=True)
        self.attn_W = nn.Linear(hidden_size, hidden_size)
        self.attn_v = nn.Linear(hidden_size, 1, bias=False)
        self.out = nn.Linear(hidden_size, n_classes)

    def forward_embedded(self, emb, mask):
        '''returns logits [B x C], attention [B x T] and hidden states [B x T x H]'''
        # right padding: hidden states of real tokens do not depend on the padding
        H, _ = self.lstm(emb)
        scores = self.attn_v(torch.tanh(self.attn_W(H))).squeeze(-1)
        scores = scores.masked_fill(~mask, float('-inf'))
        alpha = torch.softmax(scores, dim=-1)
        context = (alpha.unsqueeze(-1) * H).sum(1)
        return self.out(context), alpha, H

    def forward(self, ids, mask):
        return self.forward_embedded(self.embedding(ids), mask)


@dataclass
class DiversityLstmConfig:
    '''Training configuration of the attribution classifier.'''
    lambda_con: float = 10.0
    epochs: int = 10
    lr: float = 1e-3
    hidden_size: int = 128
    embedding_dim: int = 128
    batch_size: int = 32
    seed: int = 0


class DiversityLstmModel:
    '''A trained attribution classifier, together with its vocabulary and training log.

    The model is used in evaluation mode only after training.'''

    def __init__(self, net: DiversityLstm, vocab: Vocabulary, labels, config: DiversityLstmConfig, history=None, metrics=None):
        self.net = net.eval()
        self.vocab = vocab
        self.labels = tuple(labels)
        self.config = config
        self.history = pd.DataFrame(history if history is not None else [])
        self.metrics = dict(metrics or {})

    @property
    def lambda_con(self):
        return self.config.lambda_con

    @property
    def is_diversity_trained(self):
        return self.config.lambda_con > 0

    def __str__(self):
        kind = 'diversity' if self.is_diversity_trained else 'vanilla'
        return f'{type(self).__name__} ({kind}, lambda_con={self.lambda_con}, {len(self.labels)} styles, dev accuracy={self.metrics.get("dev_accuracy")})'

    def encode(self, sentence):
        return encode(_tokens(sentence), self.vocab)

    def embed(self, ids):
        return self.net.embedding(ids)

    def logits_from_embedded(self, emb, mask):
        return self.net.forward_embedded(emb, mask)[0]

    def attention(self, ids, mask):
        return self.net(ids, mask)[1]

    def hidden_states(self, ids, mask):
        return self.net(ids, mask)[2]

    @torch.no_grad()
    def predict(self, sentences, batch_size=256):
        '''predicted label ids for a list of sentences'''
        pred = []
        for batch in batches(list(sentences), batch_size):
            ids, mask = pad_sequences([self.encode(s) for s in batch], self.vocab.pad_id)
            pred.append(self.net(ids, mask)[0].argmax(-1))
        return torch.cat(pred).numpy() if pred else np.zeros(0, dtype=int)

    def save(self, out_dir):
        '''Saves weights, vocabulary and a metadata document to out_dir.'''
        os.makedirs(out_dir, exist_ok=True)
        atomic_torch_save(self.net.state_dict(), os.path.join(out_dir, 'model.pt'))
        self.vocab.save(os.path.join(out_dir, 'vocab.json'))
        meta = {'format_version': CHECKPOINT_FORMAT, 'stylemlm_version': __version__, 'config': asdict(self.config),
                'labels': [lab.name for lab in self.labels], 'metrics': self.metrics, 'history': self.history.to_dict('records')}
        write_json(meta, os.path.join(out_dir, 'meta.json'))
        logger.info('saved attribution model to %s', out_dir)

    @classmethod
    def load(cls, in_dir):
        from .corpus import StyleLabel
        meta = read_json(os.path.join(in_dir, 'meta.json'))
        if meta.get('format_version') != CHECKPOINT_FORMAT:
            raise IncompatibleModelError(f'unsupported checkpoint format {meta.get("format_version")} in {in_dir}')
        if meta.get('stylemlm_version') != __version__:
            logger.warning('This is stylemlm version %s, but the model in %s has been saved with version %s, which may be incompatible',
                           __version__, in_dir, meta.get('stylemlm_version'))
        vocab = Vocabulary.load(os.path.join(in_dir, 'vocab.json'))
        config = DiversityLstmConfig(**meta['config'])
        labels = [StyleLabel(i, n) for i, n in enumerate(meta['labels'])]
        net = DiversityLstm(len(vocab), len(labels), config.embedding_dim, config.hidden_size, vocab.pad_id)
        net.load_state_dict(torch.load(os.path.join(in_dir, 'model.pt'), map_location='cpu'))
        return cls(net, vocab, labels, config, meta.get('history'), meta.get('metrics'))


def _tokens(sentence):
    if isinstance(sentence, LabeledExample):
        return sentence.tokens
    if isinstance(sentence, str):
        return sentence.split(' ')
    return tuple(sentence)


def _encode_split(examples, vocab):
    return [encode(ex.tokens, vocab) for ex in examples], torch.tensor([ex.label.id for ex in examples], dtype=torch.long)


@torch.no_grad()
def evaluate_lstm(model: DiversityLstmModel, examples, batch_size=256):
    '''accuracy and mean conicity of the hidden states on a list of examples'''
    if not examples:
        return float('nan'), float('nan')
    correct, con = 0, 0.0
    for batch in batches(list(examples), batch_size):
        ids, mask = pad_sequences([model.encode(ex) for ex in batch], model.vocab.pad_id)
        logits, _, H = model.net(ids, mask)
        correct += (logits.argmax(-1) == torch.tensor([ex.label.id for ex in batch])).sum().item()
        con += conicity_torch(H, mask).sum().item()
    return correct / len(examples), con / len(examples)


def train_diversity_lstm(corpus: Corpus, lambda_con=10.0, epochs=10, seed=0, vocab: Optional[Vocabulary] = None,
                         config: Optional[DiversityLstmConfig] = None, progress_bar=False) -> DiversityLstmModel:
    '''Trains the attention classifier with the conicity penalty on its hidden states.

    The loss is the classification NLL plus lambda_con times the mean conicity of the hidden states.
    With lambda_con=0 this yields the vanilla attention model.

    :param corpus: The style labeled corpus; the train split is used for training, the dev split for validation.
    :param lambda_con: Weight of the conicity loss.
    :param epochs: Number of training epochs.
    :param seed: Random seed for initialization and data order.
    :param vocab: Vocabulary, built from the corpus with min_freq=2 if omitted.
    :param config: Further hyperparameters; lambda_con, epochs and seed arguments take precedence.
    :return: The trained DiversityLstmModel, with per epoch loss, conicity and dev accuracy in model.history.'''
    if corpus.n_styles < 2:
        raise ValueError('at least two style labels required')
    if lambda_con < 0:
        raise ValueError(f'lambda_con must be >= 0, got {lambda_con}')
    cfg = DiversityLstmConfig(**{**asdict(config or DiversityLstmConfig()), 'lambda_con': lambda_con, 'epochs': epochs, 'seed': seed})
    if vocab is None:
        vocab = build_vocab(corpus, min_freq=2)
    set_seed(cfg.seed)
    net = DiversityLstm(len(vocab), corpus.n_styles, cfg.embedding_dim, cfg.hidden_size, vocab.pad_id)
    model = DiversityLstmModel(net, vocab, corpus.labels, cfg)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    train_ids, train_y = _encode_split(corpus['train'], vocab)
    gen = make_generator(cfg.seed)
    history = []
    logger.info('training attribution classifier on %s examples (lambda_con=%s, %s epochs)', len(train_ids), cfg.lambda_con, cfg.epochs)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        net.train()
        order = torch.randperm(len(train_ids), generator=gen).tolist()
        tot_cls, tot_con, n = 0.0, 0.0, 0
        for step, idx in enumerate(tqdm(list(batches(order, cfg.batch_size)), disable=not progress_bar, unit=' batches', desc=f'epoch {epoch+1}')):
            ids, mask = pad_sequences([train_ids[i] for i in idx], vocab.pad_id)
            logits, _, H = net(ids, mask)
            loss_cls = nn.functional.cross_entropy(logits, train_y[idx])
            loss_con = conicity_torch(H, mask).mean()
            loss = loss_cls + cfg.lambda_con * loss_con
            if not torch.isfinite(loss):
                raise TrainingError(f'non-finite loss in epoch {epoch+1}, step {step}: cls={loss_cls.item()}, conicity={loss_con.item()}',
                                    epoch=epoch + 1, step=step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            tot_cls += loss_cls.item() * len(idx)
            tot_con += loss_con.item() * len(idx)
            n += len(idx)
        net.eval()
        dev_acc, dev_con = evaluate_lstm(model, corpus['dev'])
        rec = {'epoch': epoch + 1, 'loss': tot_cls / n, 'conicity': tot_con / n, 'dev_accuracy': dev_acc, 'dev_conicity': dev_con,
               'seconds': time.perf_counter() - start}
        history.append(rec)
        logger.info('epoch %s: loss=%.4f conicity=%.4f dev accuracy=%.4f', rec['epoch'], rec['loss'], rec['conicity'], rec['dev_accuracy'])
    model.history = pd.DataFrame(history)
    model.metrics = {'dev_accuracy': history[-1]['dev_accuracy'] if history else float('nan'),
                     'conicity': history[-1]['conicity'] if history else float('nan'),
                     'dev_conicity': history[-1]['dev_conicity'] if history else float('nan')}
    return model


# attribution methods


def _prepare(model, sentences):
    ids_list = [model.encode(s) for s in sentences]
    pad_id = getattr(getattr(model, 'vocab', None), 'pad_id', 0)
    ids, mask = pad_sequences(ids_list, pad_id)
    return ids, mask, [len(x) for x in ids_list]


@torch.no_grad()
def attention_batch(model: DiversityLstmModel, sentences) -> list:
    '''Attention distributions for a list of sentences, computed in one forward pass.'''
    if not sentences:
        return []
    tag = 'EA' if model.is_diversity_trained else 'VA'
    ids, mask, lengths = _prepare(model, sentences)
    alpha = model.attention(ids, mask).double().numpy()
    return [AttributionVector(a[:n] / a[:n].sum(), tag) for a, n in zip(alpha, lengths)]


def attention_scores(model: DiversityLstmModel, sentence) -> AttributionVector:
    '''Attention weights of the classifier over the tokens of sentence.

    The method tag is "EA" for a diversity trained model and "VA" for a model trained with lambda_con=0.'''
    return attention_batch(model, [sentence])[0]


def _target_grad(model, emb, mask, target=None):
    '''gradient of the target (default: predicted) class logit w.r.t. the embeddings'''
    emb = emb.detach().requires_grad_(True)
    logits = model.logits_from_embedded(emb, mask)
    if target is None:
        target = logits.argmax(-1)
    selected = logits.gather(1, target.unsqueeze(1)).squeeze(1)
    if not selected.requires_grad:
        return torch.zeros_like(emb), selected.detach(), target
    grad, = torch.autograd.grad(selected.sum(), emb, allow_unused=True)
    if grad is None:  # logits independent of the input
        grad = torch.zeros_like(emb)
    return grad, selected.detach(), target


def _gradient_batch(model, sentences, tag):
    ids, mask, lengths = _prepare(model, sentences)
    with torch.no_grad():
        emb = model.embed(ids)
    grad, _, _ = _target_grad(model, emb, mask)
    if tag == 'VG':
        raw = grad.norm(dim=-1)
        signed = raw
    else:
        signed = (grad * emb).sum(-1)
        raw = signed.abs()
    raw, signed = raw.detach().double().numpy(), signed.detach().double().numpy()
    return [normalize_scores(r[:n], tag, s[:n]) for r, s, n in zip(raw, signed, lengths)]


def vanilla_gradients_batch(model, sentences) -> list:
    return _gradient_batch(model, sentences, 'VG') if sentences else []


def gradients_times_input_batch(model, sentences) -> list:
    return _gradient_batch(model, sentences, 'GxX') if sentences else []


def vanilla_gradients(model, sentence) -> AttributionVector:
    '''L2 norm of the gradient of the predicted class logit w.r.t. each token embedding, normalized to sum to one.'''
    return _gradient_batch(model, [sentence], 'VG')[0]


def gradients_times_input(model, sentence) -> AttributionVector:
    '''Absolute dot product of gradient and embedding for each token, normalized to sum to one.'''
    return _gradient_batch(model, [sentence], 'GxX')[0]


def _ig_baseline(model, emb, ids, baseline):
    if baseline == 'zero':
        return torch.zeros_like(emb)
    pad_id = getattr(getattr(model, 'vocab', None), 'pad_id', 0)
    return model.embed(torch.full_like(ids, pad_id)).detach()


def integrated_gradients_batch(model, sentences, steps=50, baseline='zero', rel_tolerance=0.01) -> list:
    '''Integrated gradients along the straight path from the baseline, with the Riemann midpoint rule.

    Raw per token attributions are the signed sums over the embedding dimensions; their sum approximates
    f(x) - f(baseline) for the predicted class logit f. A warning is logged if the relative gap exceeds rel_tolerance.'''
    if steps < 1:
        raise ValueError(f'steps must be >= 1, got {steps}')
    if not sentences:
        return []
    ids, mask, lengths = _prepare(model, sentences)
    with torch.no_grad():
        emb = model.embed(ids)
        base = _ig_baseline(model, emb, ids, baseline)
        logits = model.logits_from_embedded(emb, mask)
        target = logits.argmax(-1)
        f_x = logits.gather(1, target.unsqueeze(1)).squeeze(1)
        f_base = model.logits_from_embedded(base, mask).gather(1, target.unsqueeze(1)).squeeze(1)
    total_grad = torch.zeros_like(emb)
    for k in range(steps):
        alpha = (k + .5) / steps
        grad, _, _ = _target_grad(model, base + alpha * (emb - base), mask, target)
        total_grad += grad
    signed = ((total_grad / steps) * (emb - base)).sum(-1).masked_fill(~mask, 0).detach().double().numpy()
    diff = (f_x - f_base).detach().double().numpy()
    out = []
    for s, n, d in zip(signed, lengths, diff):
        gap = abs(s[:n].sum() - d)
        if gap > rel_tolerance * abs(d) and gap > EPS:
            logger.warning('integrated gradients with %s steps misses completeness: |sum - (f(x)-f(baseline))| = %.3g (%.2g%%)',
                           steps, gap, 100 * gap / max(abs(d), EPS))
        out.append(normalize_scores(np.abs(s[:n]), 'IG', s[:n], gap))
    return out


def integrated_gradients(model, sentence, steps=50, baseline='zero') -> AttributionVector:
    '''Integrated gradients attribution of a single sentence, see integrated_gradients_batch.'''
    return integrated_gradients_batch(model, [sentence], steps, baseline)[0]


def _check_pairing(method: AttributionMethod, model):
    if method.tag in ATTENTION_METHODS:
        if not isinstance(model, DiversityLstmModel):
            raise IncompatibleModelError(f'{method.name} requires an attention classifier, got {type(model).__name__}')
        if method.tag == 'EA' and not model.is_diversity_trained:
            raise IncompatibleModelError('explainable attention requires a model trained with lambda_con > 0')
        if method.tag == 'VA' and model.is_diversity_trained:
            logger.warning('vanilla attention requested from a diversity trained model (lambda_con=%s)', model.lambda_con)


def attribute_batch(method: AttributionMethod, model, sentences, batch_size=256, progress_bar=False) -> list:
    '''Attribution distributions for a list of sentences, computed batch wise.'''
    if isinstance(method, str):
        method = AttributionMethod(method)
    _check_pairing(method, model)
    sentences = list(sentences)
    out = []
    for batch in tqdm(list(batches(sentences, batch_size)), disable=not progress_bar, unit=' batches', desc=method.tag):
        if method.tag in ATTENTION_METHODS:
            res = attention_batch(model, batch)
            # relabel, so that VA requested from a diversity model is reported as VA
            out.extend(AttributionVector(a.scores, method.tag) for a in res)
        elif method.tag == 'VG':
            out.extend(vanilla_gradients_batch(model, batch))
        elif method.tag == 'GxX':
            out.extend(gradients_times_input_batch(model, batch))
        else:
            out.extend(integrated_gradients_batch(model, batch, method.ig_steps, method.ig_baseline))
    return out


def attribute(method: AttributionMethod, model, sentence) -> AttributionVector:
    '''Dispatches to the attribution method.

    :param method: AttributionMethod or method tag.
    :raises IncompatibleModelError: if EA is requested from a model trained with lambda_con=0.'''
    return attribute_batch(method, model, [sentence])[0]


@dataclass
class Attributor:
    '''Attribution model together with the method used to produce attribution distributions.'''
    method: AttributionMethod
    model: object
    batch_size: int = 256

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = AttributionMethod(self.method)
        _check_pairing(self.method, self.model)

    def __call__(self, sentences, progress_bar=False):
        return attribute_batch(self.method, self.model, sentences, self.batch_size, progress_bar)
