import os
import json
import random
import hashlib
import itertools
import tempfile
import logging
from contextlib import contextmanager
from collections import Counter

import numpy as np
import torch

logger = logging.getLogger('stylemlm')


class CorpusFormatError(ValueError):
    '''Raised for malformed corpus files. Carries the file name and the 1-based line number.'''

    def __init__(self, message, path=None, line_no=None):
        self.path = path
        self.line_no = line_no
        where = ''
        if path is not None:
            where = f'{path}:{line_no}: ' if line_no is not None else f'{path}: '
        super().__init__(where + message)


class TrainingError(RuntimeError):
    '''Raised when training diverges (non-finite loss or parameters).'''

    def __init__(self, message, epoch=None, step=None, checkpoint=None):
        self.epoch = epoch
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(message)


class ChecksumError(RuntimeError):
    '''Raised when an artifact on disk does not match the checksum recorded in the run manifest.'''

    def __init__(self, artifact, expected, found):
        self.artifact = artifact
        super().__init__(f'checksum mismatch for artifact "{artifact}": expected {expected[:12]}, found {found[:12]}')


class IncompatibleModelError(ValueError):
    '''Raised when a model does not fit the requested operation (e.g. EA on a model trained without conicity loss).'''


def set_seed(seed):
    '''seeds python, numpy and torch RNGs'''
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def make_generator(seed):
    'a torch generator for reproducible data order'
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def pairwise(iterable):
    "s -> (s0,s1), (s1,s2), (s2, s3), ..."
    a, b = itertools.tee(iterable)
    next(b, None)
    return zip(a, b)


def ngrams(tokens, n):
    '''counts the n-grams of a token sequence

    :param tokens: sequence of tokens
    :param n: n-gram order
    :return: Counter with n-gram tuples as keys'''
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def batches(seq, batch_size):
    'yields consecutive slices of length batch_size'
    assert batch_size > 0, 'batch_size must be positive'
    for i in range(0, len(seq), batch_size):
        yield seq[i:i + batch_size]


def pad_sequences(seqs, pad_id=0, dtype=torch.long):
    '''right-pads a list of id sequences

    :return: tuple (padded tensor [B x T], boolean padding mask [B x T] which is True at real tokens)'''
    max_len = max(len(s) for s in seqs)
    out = torch.full((len(seqs), max_len), pad_id, dtype=dtype)
    mask = torch.zeros((len(seqs), max_len), dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.as_tensor(s, dtype=dtype)
        mask[i, :len(s)] = True
    return out, mask


def sha256_file(fn, chunk_size=1 << 20):
    h = hashlib.sha256()
    with open(fn, 'rb') as fh:
        for chunk in iter(lambda: fh.read(chunk_size), b''):
            h.update(chunk)
    return h.hexdigest()


def sha256_path(path):
    '''checksum of a file, or of all files in a directory (sorted by relative name)'''
    if os.path.isfile(path):
        return sha256_file(path)
    h = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for fn in sorted(files):
            full = os.path.join(root, fn)
            h.update(os.path.relpath(full, path).encode())
            h.update(sha256_file(full).encode())
    return h.hexdigest()


def sha256_obj(obj):
    'checksum of a json serializable object'
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@contextmanager
def atomic_write(fn, mode='w', encoding='utf8'):
    '''Context manager writing to a temporary file in the target directory, which replaces fn on success.'''
    dirname = os.path.dirname(os.path.abspath(fn))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix='.' + os.path.basename(fn) + '.')
    try:
        with os.fdopen(fd, mode, **({} if 'b' in mode else {'encoding': encoding})) as fh:
            yield fh
        os.replace(tmp, fn)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_torch_save(obj, fn):
    with atomic_write(fn, 'wb') as fh:
        torch.save(obj, fh)


def write_json(obj, fn):
    with atomic_write(fn) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)


def read_json(fn):
    with open(fn, encoding='utf8') as fh:
        return json.load(fh)


def append_jsonl(records, fn):
    'appends one json record per line'
    with open(fn, 'a', encoding='utf8') as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, default=str) + '\n')


def check_finite(module):
    'True if all parameters of the torch module are finite'
    return all(torch.isfinite(p).all() for p in module.parameters())


def read_jsonl(fn):
    with open(fn, encoding='utf8') as fh:
        return [json.loads(line) for line in fh if line.strip()]
