'''Style masking by attention surplus.

A token is style significant if its attribution score reaches (1 + lambda_eps) times the
mean score 1/n of the sentence. The policy is a single threshold comparison over a padded
batch of attribution scores, without sorting.'''

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from tqdm import tqdm

from .corpus import Corpus, LabeledExample, MASK, SPLITS
from .attribution import AttributionVector, GRADIENT_METHODS
from ._utils import CorpusFormatError, atomic_write

logger = logging.getLogger('stylemlm')

# lambda_eps defaults: word level style corpora, sentence pair corpora, gradient based attribution
DEFAULT_LAMBDA_EPS = {'attention': 0.15, 'pair': 0.5, 'gradient': 0.0}


@dataclass(frozen=True)
class MaskPolicyConfig:
    '''Attention surplus masking policy.

    :param lambda_eps: Surplus over the mean attribution required for masking, in [0, 1].'''
    lambda_eps: float = DEFAULT_LAMBDA_EPS['attention']

    def __post_init__(self):
        if not 0 <= self.lambda_eps <= 1:
            raise ValueError(f'lambda_eps must be in [0, 1], got {self.lambda_eps}')

    @classmethod
    def default_for(cls, method_tag, pair_corpus=False):
        '''The default policy for an attribution method tag.'''
        if method_tag in GRADIENT_METHODS:
            return cls(DEFAULT_LAMBDA_EPS['gradient'])
        return cls(DEFAULT_LAMBDA_EPS['pair' if pair_corpus else 'attention'])


@dataclass(frozen=True)
class StyleMaskedSentence:
    '''A sentence with its style tokens replaced by <mask>, referencing the source example.'''
    tokens: tuple
    mask_positions: frozenset
    original: LabeledExample

    def __post_init__(self):
        object.__setattr__(self, 'tokens', tuple(self.tokens))
        object.__setattr__(self, 'mask_positions', frozenset(self.mask_positions))
        assert len(self.tokens) == len(self.original.tokens), 'masked sentence must have the length of the original'
        for i, (tok, orig) in enumerate(zip(self.tokens, self.original.tokens)):
            if i in self.mask_positions:
                assert tok == MASK, f'position {i} is listed as masked but holds {tok}'
            else:
                assert tok == orig, f'unmasked position {i} differs from the original ({tok} != {orig})'

    @property
    def source_style(self):
        return self.original.label

    @property
    def sentence(self):
        return ' '.join(self.tokens)

    @property
    def n_masked(self):
        return len(self.mask_positions)

    def __len__(self):
        return len(self.tokens)


def compute_baseline(n, lambda_eps):
    '''Attribution threshold (1 + lambda_eps) / n for a sentence of n tokens.

    n may be an array of sentence lengths.'''
    lengths = np.asarray(n)
    if (lengths < 1).any():
        raise ValueError(f'sentence length must be >= 1, got {n}')
    baseline = (1 + lambda_eps) / lengths
    return float(baseline) if baseline.ndim == 0 else baseline


def pad_scores(vectors: Sequence):
    '''Stacks attribution vectors of different lengths into a zero padded [B x n] array and a length vector.'''
    lengths = np.array([len(v) for v in vectors], dtype=np.int64)
    scores = np.zeros((len(vectors), lengths.max() if len(vectors) else 0))
    for i, v in enumerate(vectors):
        scores[i, :lengths[i]] = v.scores if isinstance(v, AttributionVector) else v
    return scores, lengths


def attention_surplus_mask(A, lambda_eps, lengths=None):
    '''Marks the tokens with attention surplus, A_i >= (1 + lambda_eps) / n.

    :param A: An AttributionVector, a 1D score array, or a padded [B x n] score array.
    :param lambda_eps: The surplus parameter.
    :param lengths: For padded arrays, the sentence lengths (default: all positions are real).
    :return: Boolean mask of the shape of the scores; padding positions are never masked.'''
    scores = A.scores if isinstance(A, AttributionVector) else np.asarray(A, dtype=np.float64)
    if scores.ndim == 1:
        return scores >= compute_baseline(len(scores), lambda_eps)
    if lengths is None:
        lengths = np.full(len(scores), scores.shape[1])
    lengths = np.asarray(lengths)
    baseline = compute_baseline(lengths, lambda_eps)
    real = np.arange(scores.shape[1])[None, :] < lengths[:, None]
    return (scores >= baseline[:, None]) & real


def apply_mask(example: LabeledExample, mask) -> StyleMaskedSentence:
    '''Replaces the tokens at masked positions by <mask>.'''
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(example.tokens),):
        raise ValueError(f'mask of length {len(mask)} does not fit sentence of length {len(example.tokens)}')
    positions = frozenset(np.flatnonzero(mask).tolist())
    tokens = tuple(MASK if i in positions else tok for i, tok in enumerate(example.tokens))
    return StyleMaskedSentence(tokens, positions, example)


def _examples(corpus, split):
    if isinstance(corpus, Corpus):
        if split is None:
            return [ex for s in SPLITS for ex in corpus[s]]
        return list(corpus[split])
    return list(corpus)


def mask_corpus(corpus, attributor, lambda_eps, split: Optional[str] = None, attributions=None, batch_size=256, progress_bar=False) -> list:
    '''Style masks all examples, batch by batch.

    :param corpus: A Corpus, or a sequence of LabeledExamples.
    :param attributor: Callable mapping a list of examples to their AttributionVectors (e.g. an attribution.Attributor).
    :param lambda_eps: The surplus parameter of the masking policy.
    :param split: Restrict to this split of the corpus (default: all splits in train, dev, test order).
    :param attributions: Precomputed attribution vectors aligned with the examples; the attributor is not called then.
    :return: List of StyleMaskedSentences, aligned with the examples.'''
    MaskPolicyConfig(lambda_eps)
    examples = _examples(corpus, split)
    if attributions is not None and len(attributions) != len(examples):
        raise ValueError(f'{len(attributions)} attributions given for {len(examples)} examples')
    out = []
    for start in tqdm(range(0, len(examples), batch_size), disable=not progress_bar, unit=' batches', desc='masking'):
        batch = examples[start:start + batch_size]
        attr = attributions[start:start + batch_size] if attributions is not None else attributor(batch)
        scores, lengths = pad_scores(attr)
        masks = attention_surplus_mask(scores, lambda_eps, lengths)
        out.extend(apply_mask(ex, m[:n]) for ex, m, n in zip(batch, masks, lengths))
    n_single = sum(1 for ex in examples if len(ex) == 1)
    if n_single and lambda_eps > 0:
        logger.warning('%s single token sentences stay unmasked with lambda_eps=%s', n_single, lambda_eps)
    if out:
        logger.info('masked %s of %s tokens in %s sentences (lambda_eps=%s)', sum(m.n_masked for m in out),
                    sum(len(m) for m in out), len(out), lambda_eps)
    return out


def mask_rate(masked: Sequence[StyleMaskedSentence]):
    '''Fraction of masked tokens.'''
    total = sum(len(m) for m in masked)
    return sum(m.n_masked for m in masked) / total if total else 0.0


def write_masked(masked: Sequence[StyleMaskedSentence], fn):
    '''Writes masked sentences as "label id<TAB>masked tokens<TAB>comma separated positions".'''
    with atomic_write(fn) as fh:
        for m in masked:
            fh.write(f'{m.source_style.id}\t{m.sentence}\t{",".join(str(i) for i in sorted(m.mask_positions))}\n')
    logger.info('wrote %s masked sentences to %s', len(masked), fn)


def read_masked(fn, examples: Sequence[LabeledExample]) -> list:
    '''Reads masked sentences written by write_masked, aligned with their source examples.'''
    out = []
    examples = list(examples)
    with open(fn, encoding='utf8') as fh:
        lines = [line.rstrip('\n') for line in fh if line.strip()]
    if len(lines) != len(examples):
        raise CorpusFormatError(f'{len(lines)} masked sentences for {len(examples)} source examples', fn)
    for line_no, (line, ex) in enumerate(zip(lines, examples), start=1):
        fields = line.split('\t')
        if len(fields) != 3:
            raise CorpusFormatError(f'expected 3 tab separated fields, found {len(fields)}', fn, line_no)
        if fields[0] != str(ex.label.id):
            raise CorpusFormatError(f'label "{fields[0]}" does not match source label "{ex.label.id}"', fn, line_no)
        positions = [int(p) for p in fields[2].split(',')] if fields[2] else []
        mask = np.zeros(len(ex), dtype=bool)
        try:
            mask[positions] = True
            masked = apply_mask(ex, mask)
        except (IndexError, ValueError) as e:
            raise CorpusFormatError(f'invalid mask positions: {e}', fn, line_no) from e
        if masked.sentence != fields[1]:
            raise CorpusFormatError('masked tokens do not match the source sentence', fn, line_no)
        out.append(masked)
    return out
