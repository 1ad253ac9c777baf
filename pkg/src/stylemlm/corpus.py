import os
import random
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import pandas as pd
import yaml

from ._utils import CorpusFormatError, atomic_write, write_json, read_json
from .decorators import experimental

logger = logging.getLogger('stylemlm')

SPLITS = ('train', 'dev', 'test')
PAD, UNK, MASK = '<pad>', '<unk>', '<mask>'
STYLE_SLOT = 'STYLE'

# a small two style corpus in the spirit of review sentiment data, used when no toy spec file is given
DEFAULT_TOY_SPEC = {
    'seed': 42,
    'size_per_label': 1000,
    'dev_size': 100,
    'test_size': 100,
    'labels': ['negative', 'positive'],
    'templates': [
        'the food was STYLE',
        'the service here is STYLE and the staff STYLE',
        'our waiter was STYLE',
        'this place is STYLE for lunch',
        'the pizza tasted STYLE',
        'i thought the movie was STYLE and STYLE',
        'STYLE prices and a STYLE menu',
        'the room was STYLE , the view STYLE and the bed STYLE',
        'my order came out STYLE',
        'the coffee is always STYLE',
    ],
    'lexicons': {
        'negative': ['bad', 'awful', 'terrible', 'rude', 'horrible', 'bland', 'poor', 'disappointing'],
        'positive': ['good', 'great', 'excellent', 'friendly', 'amazing', 'delicious', 'nice', 'wonderful'],
    },
}


@dataclass(frozen=True)
class StyleLabel:
    '''A style attribute (e.g. a sentiment or discourse class).'''
    id: int
    name: str


@dataclass(frozen=True)
class LabeledExample:
    '''A pre-tokenized sentence with its style label, and an optional human reference for the transferred sentence.'''
    tokens: tuple
    label: StyleLabel
    reference: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, 'tokens', tuple(self.tokens))
        if self.reference is not None:
            object.__setattr__(self, 'reference', tuple(self.reference))
        if not self.tokens:
            raise ValueError('empty sentence')
        for tok in self.tokens:
            if not tok or any(c.isspace() for c in tok):
                raise ValueError(f'invalid token {tok!r}: tokens must be non-empty and must not contain whitespace')

    @property
    def sentence(self):
        return ' '.join(self.tokens)

    def __len__(self):
        return len(self.tokens)


class Corpus:
    '''Non-parallel style labeled dataset, organized in train, dev and test split.

    Corpus objects are not modified after construction.'''

    def __init__(self, splits: dict, labels: Sequence[StyleLabel]):
        labels = tuple(labels)
        if len(labels) < 2:
            raise ValueError(f'at least 2 style labels required, found {len(labels)}')
        if [lab.id for lab in labels] != list(range(len(labels))):
            raise ValueError('style label ids must be contiguous from 0')
        unknown = set(splits) - set(SPLITS)
        if unknown:
            raise ValueError(f'unknown split(s): {", ".join(sorted(unknown))}')
        label_set = set(labels)
        self._splits = {}
        for split in SPLITS:
            examples = tuple(splits.get(split, ()))
            bad = [ex for ex in examples if ex.label not in label_set]
            if bad:
                raise ValueError(f'{len(bad)} examples in {split} split have labels not in {[lab.name for lab in labels]}')
            self._splits[split] = examples
        self.labels = labels

    @classmethod
    def from_label_names(cls, splits: dict, label_names: Sequence[str]):
        '''Creates a corpus from splits of (tokens, label id) tuples.'''
        labels = [StyleLabel(i, n) for i, n in enumerate(label_names)]
        return cls({k: [LabeledExample(toks, labels[lid]) for toks, lid in v] for k, v in splits.items()}, labels)

    def __getitem__(self, split) -> tuple:
        return self._splits[split]

    @property
    def splits(self):
        return dict(self._splits)

    def __len__(self):
        return sum(len(v) for v in self._splits.values())

    def __str__(self):
        sizes = ', '.join(f'{len(self._splits[s])} {s}' for s in SPLITS)
        return f'{type(self).__name__} with {len(self.labels)} styles ({", ".join(lab.name for lab in self.labels)}) and {sizes} examples'

    def label(self, key: Union[int, str]) -> StyleLabel:
        '''Get a style label by id or by name.'''
        for lab in self.labels:
            if key == lab.id or key == lab.name:
                return lab
        raise KeyError(key)

    @property
    def n_styles(self):
        return len(self.labels)

    def has_references(self, split='test'):
        return bool(self._splits[split]) and all(ex.reference is not None for ex in self._splits[split])

    def stats(self) -> pd.DataFrame:
        '''Number of examples per split and style label.

        :return: DataFrame with style label names as index and splits as columns.'''
        counts = {split: Counter(ex.label.name for ex in self._splits[split]) for split in SPLITS}
        return pd.DataFrame({split: [counts[split][lab.name] for lab in self.labels] for split in SPLITS},
                            index=[lab.name for lab in self.labels])


def _parse_label(field, label_names, fn, line_no):
    try:
        label_id = int(field)
    except ValueError:
        raise CorpusFormatError(f'label "{field}" is not an integer', fn, line_no) from None
    if not 0 <= label_id < len(label_names):
        raise CorpusFormatError(f'unknown label {label_id} (known labels: 0-{len(label_names)-1})', fn, line_no)
    return label_id


def _parse_tokens(sentence, fn, line_no):
    if not sentence.strip():
        raise CorpusFormatError('empty sentence', fn, line_no)
    tokens = sentence.split(' ')
    if any(not tok for tok in tokens):
        raise CorpusFormatError('empty token (tokens must be separated by single spaces)', fn, line_no)
    return tokens


def _read_split(fn, labels, n_fields=2):
    examples = []
    with open(fn, encoding='utf8') as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip('\r\n')
            if not line:
                continue
            fields = line.split('\t')
            if len(fields) != n_fields:
                raise CorpusFormatError(f'expected {n_fields} tab separated fields, found {len(fields)}', fn, line_no)
            label_id = _parse_label(fields[0], labels, fn, line_no)
            tokens = [tok for sent in fields[1:] for tok in _parse_tokens(sent, fn, line_no)]
            examples.append(LabeledExample(tokens, labels[label_id]))
    return examples


def _read_references(fn, examples):
    with open(fn, encoding='utf8') as fh:
        refs = [line.rstrip('\r\n') for line in fh]
    if refs and not refs[-1]:
        refs = refs[:-1]
    if len(refs) != len(examples):
        raise CorpusFormatError(f'{len(refs)} references for {len(examples)} test examples', fn)
    return [LabeledExample(ex.tokens, ex.label, _parse_tokens(ref, fn, i + 1)) for i, (ex, ref) in enumerate(zip(examples, refs))]


def _load(path, label_names, n_fields, reference_file):
    if len(label_names) < 2:
        raise ValueError('at least two label names are required')
    labels = [StyleLabel(i, n) for i, n in enumerate(label_names)]
    splits = {}
    for split in SPLITS:
        fn = os.path.join(path, f'{split}.tsv')
        if not os.path.exists(fn):
            if split == 'train':
                raise FileNotFoundError(f'missing training split {fn}')
            logger.warning('no %s split found at %s', split, fn)
            continue
        logger.info('reading %s split from %s', split, fn)
        splits[split] = _read_split(fn, labels, n_fields)
    if reference_file is not None:
        splits['test'] = _read_references(reference_file, splits.get('test', []))
    return Corpus(splits, labels)


def load_corpus(path, label_names: Sequence[str], reference_file=None) -> Corpus:
    '''Imports a style labeled corpus from split files.

    The directory must contain "train.tsv" and may contain "dev.tsv" and "test.tsv".
    Each line holds "<label-id><TAB><space separated tokens>", the sentences are expected to be pre-tokenized.

    :param path: Directory with the split files.
    :param label_names: Names of the style labels, ordered by label id.
    :param reference_file: Optional file with one human reference sentence per test line, enabling r-BLEU.
    :return: The Corpus.'''
    return _load(path, label_names, 2, reference_file)


@experimental
def load_pair_corpus(path, label_names: Sequence[str], reference_file=None) -> Corpus:
    '''Imports a sentence pair corpus (e.g. natural language inference data for discourse style transfer).

    Lines hold "<label-id><TAB><premise><TAB><hypothesis>". The two token sequences are concatenated
    without separator token, so masking and transfer operate on both sentences as one sequence.'''
    return _load(path, label_names, 3, reference_file)


def write_corpus(corpus: Corpus, out_dir, planted=None):
    '''Writes the corpus in the format read by load_corpus.

    :param planted: Optional dict with split names as keys and lists of planted style positions as values,
        written to "planted.tsv".
    :return: list of written files'''
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for split in SPLITS:
        fn = os.path.join(out_dir, f'{split}.tsv')
        with atomic_write(fn) as fh:
            for ex in corpus[split]:
                fh.write(f'{ex.label.id}\t{ex.sentence}\n')
        written.append(fn)
    with atomic_write(os.path.join(out_dir, 'labels.txt')) as fh:
        fh.write(''.join(f'{lab.name}\n' for lab in corpus.labels))
    written.append(os.path.join(out_dir, 'labels.txt'))
    if corpus.has_references():
        with atomic_write(os.path.join(out_dir, 'test.ref')) as fh:
            fh.write(''.join(' '.join(ex.reference) + '\n' for ex in corpus['test']))
        written.append(os.path.join(out_dir, 'test.ref'))
    if planted is not None:
        fn = os.path.join(out_dir, 'planted.tsv')
        with atomic_write(fn) as fh:
            for split in SPLITS:
                for i, pos in enumerate(planted[split]):
                    fh.write(f'{split}\t{i}\t{",".join(str(p) for p in sorted(pos))}\n')
        written.append(fn)
    logger.info('wrote corpus to %s', out_dir)
    return written


def read_label_names(path):
    'reads "labels.txt" as written by write_corpus'
    with open(os.path.join(path, 'labels.txt'), encoding='utf8') as fh:
        return [line.strip() for line in fh if line.strip()]


def read_planted(fn):
    '''reads planted style positions, as written by write_corpus

    :return: dict with split names as keys and lists of position sets as values'''
    planted = {split: [] for split in SPLITS}
    with open(fn, encoding='utf8') as fh:
        for line in fh:
            split, _, pos = line.rstrip('\r\n').split('\t')
            planted[split].append(frozenset(int(p) for p in pos.split(',') if p))
    return planted


class Vocabulary:
    '''Bijective token to id mapping.

    The reserved tokens occupy the lowest ids, in the order <pad>, <unk>, <mask>, <src_0>..<src_k>, <dst_0>..<dst_k>.
    Tokens not in the vocabulary are encoded as <unk>.'''

    def __init__(self, tokens: Sequence[str], n_styles: int):
        self.n_styles = n_styles
        reserved = self.reserved_tokens(n_styles)
        self.itos = list(reserved) + [tok for tok in tokens if tok not in set(reserved)]
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        assert len(self.stoi) == len(self.itos), 'vocabulary tokens must be unique'

    @staticmethod
    def reserved_tokens(n_styles):
        return [PAD, UNK, MASK] + [f'<src_{k}>' for k in range(n_styles)] + [f'<dst_{k}>' for k in range(n_styles)]

    @property
    def n_reserved(self):
        return 3 + 2 * self.n_styles

    pad_id = 0
    unk_id = 1
    mask_id = 2

    def src_id(self, style):
        return self.stoi[f'<src_{int(getattr(style, "id", style))}>']

    def dst_id(self, style):
        return self.stoi[f'<dst_{int(getattr(style, "id", style))}>']

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __getitem__(self, token):
        return self.stoi.get(token, self.unk_id)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def to_dict(self):
        return {'n_styles': self.n_styles, 'tokens': self.itos[self.n_reserved:]}

    @classmethod
    def from_dict(cls, d):
        return cls(d['tokens'], d['n_styles'])

    def save(self, fn):
        write_json(self.to_dict(), fn)

    @classmethod
    def load(cls, fn):
        return cls.from_dict(read_json(fn))


def build_vocab(corpus: Corpus, min_freq: int = 2) -> Vocabulary:
    '''Builds the vocabulary from the training split.

    Tokens are ordered by decreasing frequency, ties are broken lexicographically.

    :param min_freq: Tokens with lower training frequency are mapped to <unk>.'''
    if not len(corpus):
        raise ValueError('cannot build vocabulary from empty corpus')
    if min_freq < 1:
        raise ValueError(f'min_freq must be >= 1, got {min_freq}')
    freq = Counter(tok for ex in corpus['train'] for tok in ex.tokens)
    tokens = [tok for tok, n in sorted(freq.items(), key=lambda x: (-x[1], x[0])) if n >= min_freq]
    vocab = Vocabulary(tokens, corpus.n_styles)
    logger.info('built vocabulary of %s tokens (%s below min_freq=%s)', len(vocab), len(freq) - len(tokens), min_freq)
    return vocab


def encode(sentence: Union[str, Sequence[str]], vocab: Vocabulary) -> list:
    '''Converts a sentence (string or token sequence) into token ids.'''
    tokens = sentence.split(' ') if isinstance(sentence, str) else list(sentence)
    if not tokens or tokens == ['']:
        raise ValueError('cannot encode empty sentence')
    return [vocab[tok] for tok in tokens]


def decode(ids: Sequence[int], vocab: Vocabulary) -> list:
    '''Converts token ids into tokens.

    :raises KeyError: for ids outside the vocabulary'''
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab.itos):
            raise KeyError(f'unknown token id {i}')
        out.append(vocab.itos[i])
    return out


@dataclass
class ToyCorpusSpec:
    '''Specification of a synthetic corpus with planted style tokens.

    Each template is a token sequence with 1-3 style slots (the token "STYLE"), which are filled
    with tokens from the style lexicon of the example label. With fixed_slots, the k-th slot of template t
    always takes lexicon word (t + k) modulo the lexicon size, so that masked style tokens are predictable
    from the template and the label; otherwise the words are drawn uniformly.'''
    seed: int
    size_per_label: int
    templates: list
    lexicons: dict
    labels: list = field(default_factory=list)
    dev_size: int = 0
    test_size: int = 0
    fixed_slots: bool = False

    def __post_init__(self):
        self.templates = [t.split(' ') if isinstance(t, str) else list(t) for t in self.templates]
        if not self.labels:
            self.labels = list(self.lexicons)
        self.validate()

    def validate(self):
        if len(self.labels) < 2:
            raise ValueError('toy corpus needs at least 2 labels')
        for lab in self.labels:
            if lab not in self.lexicons:
                raise ValueError(f'missing lexicon for label "{lab}" (key lexicons.{lab})')
            if not self.lexicons[lab]:
                raise ValueError(f'empty lexicon for label "{lab}"')
        if not self.templates:
            raise ValueError('no templates specified')
        for tmpl in self.templates:
            n_slots = tmpl.count(STYLE_SLOT)
            if not 1 <= n_slots <= 3:
                raise ValueError(f'template "{" ".join(tmpl)}" must contain 1-3 {STYLE_SLOT} slots, found {n_slots}')
        content = {tok for tmpl in self.templates for tok in tmpl if tok != STYLE_SLOT}
        seen = {}
        for lab in self.labels:
            for tok in self.lexicons[lab]:
                if tok in content:
                    raise ValueError(f'style token "{tok}" of label "{lab}" also occurs as template content')
                if seen.get(tok, lab) != lab:
                    raise ValueError(f'style token "{tok}" occurs in lexicons of "{seen[tok]}" and "{lab}"')
                seen[tok] = lab
        if self.dev_size < 0 or self.test_size < 0 or self.dev_size + self.test_size >= self.size_per_label:
            raise ValueError(f'invalid split sizes: size_per_label={self.size_per_label}, dev_size={self.dev_size}, test_size={self.test_size}')

    @classmethod
    def from_dict(cls, d):
        required = ('seed', 'size_per_label', 'templates', 'lexicons')
        for key in required:
            if key not in d:
                raise ValueError(f'missing key "{key}" in toy corpus spec')
        unknown = set(d) - set(required) - {'labels', 'dev_size', 'test_size', 'fixed_slots'}
        if unknown:
            raise ValueError(f'unknown key(s) in toy corpus spec: {", ".join(sorted(unknown))}')
        return cls(**d)

    @classmethod
    def from_yaml(cls, fn):
        with open(fn, encoding='utf8') as fh:
            d = yaml.safe_load(fh)
        if not isinstance(d, dict):
            raise ValueError(f'toy corpus spec {fn} must be a key-value document')
        return cls.from_dict(d)


def generate_toy_corpus(spec: ToyCorpusSpec):
    '''Generates a corpus with known style token positions.

    For each label, size_per_label sentences are sampled from the templates, and split into
    train, dev (dev_size) and test (test_size) sentences per label.

    :return: Tuple (Corpus, planted), where planted is a dict with split names as keys and
        lists of frozensets of style token positions, aligned with the examples of the split.'''
    rng = random.Random(spec.seed)
    labels = [StyleLabel(i, n) for i, n in enumerate(spec.labels)]
    splits = {split: [] for split in SPLITS}
    for lab in labels:
        lexicon = list(spec.lexicons[lab.name])
        drawn = []
        for _ in range(spec.size_per_label):
            t = rng.randrange(len(spec.templates))
            tokens, pos = [], set()
            for i, tok in enumerate(spec.templates[t]):
                if tok == STYLE_SLOT:
                    tokens.append(lexicon[(t + len(pos)) % len(lexicon)] if spec.fixed_slots else rng.choice(lexicon))
                    pos.add(i)
                else:
                    tokens.append(tok)
            drawn.append((LabeledExample(tokens, lab), frozenset(pos)))
        n_train = spec.size_per_label - spec.dev_size - spec.test_size
        splits['train'].extend(drawn[:n_train])
        splits['dev'].extend(drawn[n_train:n_train + spec.dev_size])
        splits['test'].extend(drawn[n_train + spec.dev_size:])
    for split in SPLITS:
        rng.shuffle(splits[split])
    corpus = Corpus({split: [ex for ex, _ in v] for split, v in splits.items()}, labels)
    planted = {split: [pos for _, pos in v] for split, v in splits.items()}
    logger.info('generated toy %s', corpus)
    return corpus, planted
