'''Evaluation of style masking and style transfer.

Transfer outputs are scored by the target style accuracy of an independently trained classifier (TST%),
BLEU against the source (s-BLEU) and against human references (r-BLEU), and ROUGE-L.
Masked sentences are scored by the classifier accuracy w.r.t. the source style (lower is better)
and BLEU against the source (higher is better).'''

import os
import math
import time
import logging
from dataclasses import dataclass, asdict, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch
from torch import nn
from scipy.stats import linregress
from sklearn.metrics import precision_recall_fscore_support
from tqdm import tqdm

from .corpus import Corpus, LabeledExample, StyleLabel, Vocabulary, build_vocab, encode, MASK, UNK
from .masking import StyleMaskedSentence, attention_surplus_mask, mask_corpus, mask_rate
from ._utils import TrainingError, set_seed, make_generator, batches, ngrams, pairwise, atomic_torch_save, atomic_write, write_json, read_json
from . import __version__

logger = logging.getLogger('stylemlm')

ROUGE_BETA = 1.2
NO_MASKING = 'No Masking'


def _tokens(sentence):
    if isinstance(sentence, (LabeledExample, StyleMaskedSentence)):
        return list(sentence.tokens)
    if isinstance(sentence, str):
        return sentence.split()
    return list(sentence)


class BiLstmClassifier(nn.Module):
    '''Bidirectional LSTM with max pooling over the token positions.'''

    def __init__(self, vocab_size, n_classes, embedding_dim=128, hidden_size=128, pad_id=0):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embedding_dim, padding_idx=pad_id)
        self.lstm = nn.LSTM(embedding_dim, hidden_size, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * hidden_size, n_classes)

    def forward(self, ids, lengths):
        packed = nn.utils.rnn.pack_padded_sequence(self.embedding(ids), lengths, batch_first=True, enforce_sorted=False)
        H, _ = nn.utils.rnn.pad_packed_sequence(self.lstm(packed)[0], batch_first=True, padding_value=float('-inf'))
        return self.out(H.max(1).values)


@dataclass
class EvalClassifierConfig:
    epochs: int = 5
    lr: float = 1e-3
    hidden_size: int = 128
    embedding_dim: int = 128
    batch_size: int = 32
    min_freq: int = 2
    seed: int = 0


class EvalClassifier:
    '''Style classifier used to evaluate masking and transfer; frozen after training.

    <mask> tokens are fed as <unk>.'''

    def __init__(self, net: BiLstmClassifier, vocab: Vocabulary, labels, config: EvalClassifierConfig, dev_accuracy=float('nan'), history=None):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.vocab = vocab
        self.labels = tuple(labels)
        self.config = config
        self.dev_accuracy = dev_accuracy
        self.history = list(history or [])

    def __str__(self):
        return f'{type(self).__name__} ({len(self.labels)} styles, dev accuracy={self.dev_accuracy:.4f})'

    def encode(self, sentence):
        return encode([UNK if tok == MASK else tok for tok in _tokens(sentence)], self.vocab)

    @torch.no_grad()
    def predict(self, sentences, batch_size=256) -> np.ndarray:
        '''Predicted style ids.'''
        return _predict(self.net, [self.encode(s) for s in sentences], self.vocab.pad_id, batch_size)

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        atomic_torch_save(self.net.state_dict(), os.path.join(out_dir, 'model.pt'))
        self.vocab.save(os.path.join(out_dir, 'vocab.json'))
        write_json({'stylemlm_version': __version__, 'config': asdict(self.config), 'labels': [lab.name for lab in self.labels],
                    'dev_accuracy': self.dev_accuracy, 'history': self.history}, os.path.join(out_dir, 'meta.json'))

    @classmethod
    def load(cls, in_dir):
        meta = read_json(os.path.join(in_dir, 'meta.json'))
        if meta.get('stylemlm_version') != __version__:
            logger.warning('This is stylemlm version %s, but the classifier in %s has been saved with version %s, which may be incompatible',
                           __version__, in_dir, meta.get('stylemlm_version'))
        vocab = Vocabulary.load(os.path.join(in_dir, 'vocab.json'))
        config = EvalClassifierConfig(**meta['config'])
        labels = [StyleLabel(i, n) for i, n in enumerate(meta['labels'])]
        net = BiLstmClassifier(len(vocab), len(labels), config.embedding_dim, config.hidden_size, vocab.pad_id)
        net.load_state_dict(torch.load(os.path.join(in_dir, 'model.pt'), map_location='cpu'))
        return cls(net, vocab, labels, config, meta['dev_accuracy'], meta.get('history'))


def _predict(net, id_lists, pad_id, batch_size):
    if not id_lists:
        return np.zeros(0, dtype=np.int64)
    pred = []
    for batch in batches(id_lists, batch_size):
        ids, lengths = _pad(batch, pad_id)
        pred.append(net(ids, lengths).argmax(-1))
    return torch.cat(pred).numpy()


def _pad(id_lists, pad_id):
    lengths = torch.tensor([len(x) for x in id_lists])
    ids = torch.full((len(id_lists), int(lengths.max())), pad_id, dtype=torch.long)
    for i, x in enumerate(id_lists):
        ids[i, :len(x)] = torch.tensor(x)
    return ids, lengths


def train_eval_classifier(corpus: Corpus, seed=0, config: Optional[EvalClassifierConfig] = None, progress_bar=False) -> EvalClassifier:
    '''Trains the bidirectional LSTM evaluation classifier on the train split.

    :param corpus: Corpus with train and dev splits.
    :param seed: Random seed; overrides config.seed.
    :param config: Further hyperparameters.
    :return: The frozen EvalClassifier, with its dev accuracy.'''
    if not corpus['train'] or not corpus['dev']:
        raise ValueError('evaluation classifier requires non-empty train and dev splits')
    config = EvalClassifierConfig(**{**asdict(config or EvalClassifierConfig()), 'seed': seed})
    vocab = build_vocab(corpus, config.min_freq)
    set_seed(config.seed)
    net = BiLstmClassifier(len(vocab), corpus.n_styles, config.embedding_dim, config.hidden_size, vocab.pad_id)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)
    train_ids = [encode(ex.tokens, vocab) for ex in corpus['train']]
    train_y = torch.tensor([ex.label.id for ex in corpus['train']])
    dev_ids = [encode(ex.tokens, vocab) for ex in corpus['dev']]
    dev_y = np.array([ex.label.id for ex in corpus['dev']])
    gen = make_generator(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        net.train()
        order = torch.randperm(len(train_ids), generator=gen).tolist()
        losses = []
        for idx in tqdm(list(batches(order, config.batch_size)), disable=not progress_bar, unit=' batches', desc=f'classifier {epoch}'):
            ids, lengths = _pad([train_ids[i] for i in idx], vocab.pad_id)
            loss = nn.functional.cross_entropy(net(ids, lengths), train_y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f'non-finite loss training the evaluation classifier in epoch {epoch}', epoch=epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        net.eval()
        with torch.no_grad():
            dev_acc = float((_predict(net, dev_ids, vocab.pad_id, 256) == dev_y).mean())
        history.append({'epoch': epoch, 'loss': float(np.mean(losses)), 'dev_accuracy': dev_acc, 'seconds': time.perf_counter() - start})
        logger.info('evaluation classifier epoch %s: loss=%.4f dev accuracy=%.4f', epoch, history[-1]['loss'], dev_acc)
    return EvalClassifier(net, vocab, corpus.labels, config, history[-1]['dev_accuracy'] if history else float('nan'), history)


def _label_ids(targets):
    return np.array([int(getattr(t, 'id', t)) for t in targets])


def tst_percent(clf: EvalClassifier, outputs, targets) -> float:
    '''Percentage of outputs classified as their target style.'''
    outputs, targets = list(outputs), list(targets)
    if not outputs:
        raise ValueError('no outputs to evaluate')
    if len(outputs) != len(targets):
        raise ValueError(f'{len(outputs)} outputs but {len(targets)} target styles')
    return 100 * float((clf.predict(outputs) == _label_ids(targets)).mean())


def _reference_sets(reference_sets):
    out = []
    for refs in reference_sets:
        if isinstance(refs, (str, LabeledExample)):
            refs = [refs]
        out.append([_tokens(r) for r in refs])
    return out


def bleu(candidates, reference_sets, max_n=4) -> float:
    '''Corpus level BLEU in [0, 100], without smoothing.

    :param candidates: Candidate sentences (strings or token sequences).
    :param reference_sets: Per candidate, a list of reference sentences (a single string is taken as one reference).
    :param max_n: Highest n-gram order, uniformly weighted.
    :return: 100 times the brevity penalty times the geometric mean of the modified n-gram precisions;
        0 if any of the corpus level precisions is 0.'''
    candidates = [_tokens(c) for c in candidates]
    reference_sets = _reference_sets(reference_sets)
    if len(candidates) != len(reference_sets):
        raise ValueError(f'{len(candidates)} candidates but {len(reference_sets)} reference sets')
    if not candidates:
        raise ValueError('no candidates to evaluate')
    matches, totals = np.zeros(max_n), np.zeros(max_n)
    cand_len, ref_len = 0, 0
    for cand, refs in zip(candidates, reference_sets):
        if not refs:
            raise ValueError('empty reference set')
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            max_ref = {}
            for ref in refs:
                for gram, c in ngrams(ref, n).items():
                    max_ref[gram] = max(max_ref.get(gram, 0), c)
            matches[n - 1] += sum(min(c, max_ref.get(gram, 0)) for gram, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
        cand_len += len(cand)
        # closest reference length, the shorter one on ties
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    if (matches == 0).any():
        return 0.0
    log_precision = np.mean(np.log(matches / totals))
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return 100 * bp * math.exp(log_precision)


def s_bleu(candidates, sources) -> float:
    '''BLEU of the candidates with the source sentences as single references.'''
    return bleu(candidates, [[s] for s in sources])


def lcs_length(a, b) -> int:
    '''Length of the longest common subsequence of two token sequences.'''
    if not a or not b:
        return 0
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    for tok in a:
        cur = np.zeros_like(prev)
        for j, other in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if tok == other else max(prev[j], cur[j - 1])
        prev = cur
    return int(prev[-1])


def rouge_l(candidates, references, beta=ROUGE_BETA) -> float:
    '''Mean per sentence LCS based F-measure, in [0, 1].'''
    candidates, references = [_tokens(c) for c in candidates], [_tokens(r) for r in references]
    if len(candidates) != len(references):
        raise ValueError(f'{len(candidates)} candidates but {len(references)} references')
    if not candidates:
        raise ValueError('no candidates to evaluate')
    scores = []
    for cand, ref in zip(candidates, references):
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            scores.append(0.0)
            continue
        prec, rec = lcs / len(cand), lcs / len(ref)
        scores.append((1 + beta**2) * prec * rec / (rec + beta**2 * prec))
    return float(np.mean(scores))


@dataclass
class EvalReport:
    '''Transfer metrics.

    mean is the average of tst_percent and s_bleu, reported as "Mean-2".
    rouge_l is computed against the references if available, otherwise against the sources.'''
    tst_percent: float
    s_bleu: float
    rouge_l: float
    n_examples: int
    r_bleu: Optional[float] = None
    mean: float = field(init=False)

    def __post_init__(self):
        assert 0 <= self.tst_percent <= 100, 'tst_percent must be in [0, 100]'
        assert 0 <= self.s_bleu <= 100 + 1e-9, 's_bleu must be in [0, 100]'
        self.mean = (self.tst_percent + self.s_bleu) / 2

    def to_frame(self, name='SMLM') -> pd.DataFrame:
        cols = {'TST%': self.tst_percent, 's-BLEU': self.s_bleu}
        if self.r_bleu is not None:
            cols['r-BLEU'] = self.r_bleu
        cols.update({'ROUGE-L': self.rouge_l, 'Mean-2': self.mean, 'n': self.n_examples})
        return pd.DataFrame(cols, index=[name])

    def to_dict(self):
        return asdict(self)


def evaluate_transfer(clf: EvalClassifier, sources: Sequence[LabeledExample], outputs, targets) -> EvalReport:
    '''Scores transfer outputs against their sources, target styles and, if available, references.'''
    sources, outputs = list(sources), [_tokens(o) for o in outputs]
    if len(sources) != len(outputs):
        raise ValueError(f'{len(outputs)} outputs for {len(sources)} sources')
    has_refs = bool(sources) and all(ex.reference is not None for ex in sources)
    refs = [ex.reference for ex in sources] if has_refs else [ex.tokens for ex in sources]
    report = EvalReport(tst_percent(clf, outputs, targets), s_bleu(outputs, [ex.tokens for ex in sources]),
                        rouge_l(outputs, refs), len(outputs), bleu(outputs, [[r] for r in refs]) if has_refs else None)
    logger.info('TST%%=%.2f s-BLEU=%.2f Mean-2=%.2f on %s outputs', report.tst_percent, report.s_bleu, report.mean, report.n_examples)
    return report


@dataclass
class MaskQualityReport:
    '''Quality of style masked sentences.

    :param method: The attribution method tag, or "No Masking".
    :param acc_percent: Classifier accuracy on the masked sentences w.r.t. the source styles; lower means better style removal.
    :param acc_normalized: Percentage of masked sentences for which the classifier keeps its prediction on the unmasked source.
    :param s_bleu_masked: BLEU of the masked sentences against the sources; higher means better content preservation.
    :param mask_rate: Fraction of masked tokens.'''
    method: str
    acc_percent: float
    acc_normalized: float
    s_bleu_masked: float
    mask_rate: float
    n_examples: int

    def __post_init__(self):
        assert 0 <= self.acc_percent <= 100, 'acc_percent must be in [0, 100]'


def mask_quality(clf: EvalClassifier, masked_corpus: Sequence[StyleMaskedSentence], source_corpus: Optional[Sequence[LabeledExample]] = None,
                 method='') -> MaskQualityReport:
    '''Classifier accuracy and s-BLEU of masked sentences.

    :param source_corpus: The source examples, defaults to the originals referenced by the masked sentences.'''
    masked_corpus = list(masked_corpus)
    sources = list(source_corpus) if source_corpus is not None else [m.original for m in masked_corpus]
    if len(sources) != len(masked_corpus):
        raise ValueError(f'{len(masked_corpus)} masked sentences for {len(sources)} sources')
    if not masked_corpus:
        raise ValueError('no masked sentences to evaluate')
    pred_masked = clf.predict(masked_corpus)
    pred_source = clf.predict(sources)
    labels = _label_ids(ex.label for ex in sources)
    return MaskQualityReport(method, 100 * float((pred_masked == labels).mean()), 100 * float((pred_masked == pred_source).mean()),
                             s_bleu(masked_corpus, sources), mask_rate(masked_corpus), len(masked_corpus))


def no_masking_report(clf: EvalClassifier, examples: Sequence[LabeledExample]) -> MaskQualityReport:
    '''The control row: unmasked sentences evaluated like masked ones.'''
    examples = list(examples)
    acc = tst_percent(clf, examples, [ex.label for ex in examples])
    return MaskQualityReport(NO_MASKING, acc, 100.0, 100.0, 0.0, len(examples))


def mask_quality_table(reports: Sequence[MaskQualityReport]) -> pd.DataFrame:
    '''One row per method, with columns Accuracy%, normalized accuracy, s-BLEU and mask rate.'''
    df = pd.DataFrame([asdict(r) for r in reports]).set_index('method')
    return df.rename(columns={'acc_percent': 'Accuracy%', 'acc_normalized': 'Accuracy% (normalized)', 's_bleu_masked': 's-BLEU',
                              'mask_rate': 'mask rate', 'n_examples': 'n'})


@dataclass
class SweepCurve:
    '''Masking quality over a grid of lambda_eps values.'''
    grid: tuple
    acc_percent: list
    s_bleu_masked: list
    mask_rate: list

    def __post_init__(self):
        self.grid = tuple(self.grid)
        check_grid(self.grid)
        assert len(self.acc_percent) == len(self.s_bleu_masked) == len(self.mask_rate) == len(self.grid), 'curve values must match the grid'

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'lambda_eps': self.grid, 'acc_percent': self.acc_percent, 's_bleu_masked': self.s_bleu_masked,
                             'mask_rate': self.mask_rate})

    def to_csv(self, fn):
        with atomic_write(fn) as fh:
            self.to_frame().to_csv(fh, index=False)


def check_grid(grid):
    '''Raises ValueError unless grid is strictly increasing within [0, 1].'''
    grid = list(grid)
    if not grid:
        raise ValueError('empty lambda_eps grid')
    if any(not 0 <= x <= 1 for x in grid):
        raise ValueError(f'lambda_eps grid values must be in [0, 1]: {grid}')
    if any(b <= a for a, b in pairwise(grid)):
        raise ValueError(f'lambda_eps grid must be strictly increasing: {grid}')


def lambda_sweep(clf: EvalClassifier, corpus, attributor, grid, split='test') -> SweepCurve:
    '''Masks the corpus at each lambda_eps of the grid and evaluates the masking quality.

    Attributions are computed once and reused for all grid points.'''
    check_grid(grid)
    examples = list(corpus[split]) if isinstance(corpus, Corpus) else list(corpus)
    attributions = attributor(examples)
    acc, sb, rate = [], [], []
    for lambda_eps in grid:
        rep = mask_quality(clf, mask_corpus(examples, None, lambda_eps, attributions=attributions), examples)
        acc.append(rep.acc_percent)
        sb.append(rep.s_bleu_masked)
        rate.append(rep.mask_rate)
        logger.info('lambda_eps=%s: accuracy=%.2f%% s-BLEU=%.2f mask rate=%.3f', lambda_eps, rep.acc_percent, rep.s_bleu_masked, rep.mask_rate)
    return SweepCurve(grid, acc, sb, rate)


def masking_f1(masked_corpus: Sequence[StyleMaskedSentence], planted) -> tuple:
    '''Micro averaged precision, recall and F1 of the masked positions w.r.t. the planted style positions.

    :param planted: Per masked sentence, the set of planted style token positions.
    :return: Tuple (precision, recall, f1)'''
    masked_corpus, planted = list(masked_corpus), list(planted)
    if len(masked_corpus) != len(planted):
        raise ValueError(f'{len(planted)} planted position sets for {len(masked_corpus)} masked sentences')
    y_true = np.array([i in pos for m, pos in zip(masked_corpus, planted) for i in range(len(m))], dtype=bool)
    y_pred = np.array([i in m.mask_positions for m in masked_corpus for i in range(len(m))], dtype=bool)
    p, r, f, _ = precision_recall_fscore_support(y_true, y_pred, average='binary', zero_division=0)
    return float(p), float(r), float(f)


@dataclass
class ScalingBenchmark:
    '''Timings of batched masking, with the slope and R^2 of the log-log regression of time on token count.'''
    table: pd.DataFrame
    slope: float
    r_squared: float


def masking_scaling_benchmark(sizes=(10**4, 3 * 10**4, 10**5, 3 * 10**5, 10**6), sentence_len=20, batch_size=512, lambda_eps=0.15,
                              repeats=5, seed=0) -> ScalingBenchmark:
    '''Times attention surplus masking of random attribution scores, processed in fixed size batches.

    For each total token count the minimum over repeats is taken.'''
    rng = np.random.default_rng(seed)
    rows = []
    for n_tokens in sizes:
        n_sent = max(1, n_tokens // sentence_len)
        scores = rng.dirichlet(np.ones(sentence_len), size=n_sent)
        lengths = np.full(n_sent, sentence_len)
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            for i in range(0, n_sent, batch_size):
                attention_surplus_mask(scores[i:i + batch_size], lambda_eps, lengths[i:i + batch_size])
            times.append(time.perf_counter() - start)
        rows.append({'tokens': n_sent * sentence_len, 'seconds': min(times)})
    table = pd.DataFrame(rows)
    fit = linregress(np.log10(table['tokens']), np.log10(table['seconds']))
    logger.info('masking time scales with token count^%.3f (R^2=%.3f)', fit.slope, fit.rvalue**2)
    return ScalingBenchmark(table, float(fit.slope), float(fit.rvalue**2))


def qualitative_examples(results, n=5) -> pd.DataFrame:
    '''Input, style masked and output sentence for the first n transfers of each direction.

    :param results: TransferResults, as returned by smlm.transfer_batch.'''
    rows = []
    seen = {}
    for res in results:
        direction = f'{res.source.label.name} to {res.dst.name}'
        if seen.get(direction, 0) >= n:
            continue
        seen[direction] = seen.get(direction, 0) + 1
        for kind, text in (('Input', res.source.sentence), ('Style Masked', res.masked.sentence), ('Output', res.sentence)):
            rows.append({'direction': direction, 'example': seen[direction], 'row': kind, 'text': text})
    return pd.DataFrame(rows, columns=['direction', 'example', 'row', 'text'])


def write_report(table: pd.DataFrame, prefix):
    '''Writes a report as human readable table (prefix.txt) and as JSON records (prefix.json).'''
    with atomic_write(prefix + '.txt') as fh:
        fh.write(table.to_string() + '\n')
    write_json(table.reset_index().to_dict('records'), prefix + '.json')
    logger.info('wrote report to %s.txt and %s.json', prefix, prefix)
