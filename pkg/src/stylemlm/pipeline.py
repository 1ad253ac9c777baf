'''Pipeline stages of a run, with checksum based resumption.

Each stage writes its artifacts below the output directory and appends a record to the run manifest
(manifest.jsonl). A stage is skipped if its last successful record was produced from the same settings
and the same upstream artifacts, and its artifacts on disk still match the recorded checksums.'''

import os
import time
import logging
from contextlib import contextmanager
from datetime import datetime

import pandas as pd
import matplotlib.pyplot as plt
import torch

from .corpus import Corpus, SPLITS, DEFAULT_TOY_SPEC, ToyCorpusSpec, load_corpus, load_pair_corpus, write_corpus, \
    read_label_names, read_planted, generate_toy_corpus, build_vocab, Vocabulary, LabeledExample
from .attribution import AttributionMethod, Attributor, DiversityLstmConfig, DiversityLstmModel, train_diversity_lstm, ATTRIBUTION_METHODS
from .masking import mask_corpus, write_masked, read_masked, apply_mask
from .smlm import build_smlm, bootstrap_train, finetune, transfer_batch, save_smlm, load_smlm, TransferResult
from .evaluation import EvalClassifier, EvalClassifierConfig, train_eval_classifier, evaluate_transfer, masking_f1, mask_quality, \
    no_masking_report, mask_quality_table, lambda_sweep, qualitative_examples, write_report
from .config import RunConfig
from .plots import plot_sweep
from .decorators import timed, traceback
from ._utils import ChecksumError, CorpusFormatError, sha256_path, sha256_obj, append_jsonl, read_jsonl, atomic_write, set_seed
from . import __version__

logger = logging.getLogger('stylemlm')

STAGES = ('corpus', 'train-attr', 'mask', 'train-smlm', 'finetune', 'transfer', 'eval')
FINETUNE_KEYS = ('finetune_epochs', 'lambda_sta', 'adv_head_weight')
MANIFEST = 'manifest.jsonl'
LOCK = '.lock'


def _pid_alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def run_lock(out_dir):
    '''Exclusive ownership of the output directory, by a lock file holding the process id.'''
    os.makedirs(out_dir, exist_ok=True)
    fn = os.path.join(out_dir, LOCK)
    for _ in range(2):
        try:
            fd = os.open(fn, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                with open(fn, encoding='utf8') as fh:
                    pid = int(fh.read().strip() or -1)
            except (OSError, ValueError):
                pid = -1
            if pid > 0 and _pid_alive(pid):
                raise RuntimeError(f'output directory {out_dir} is locked by running process {pid}')
            logger.warning('replacing stale lock file %s (process %s is not running)', fn, pid)
            os.remove(fn)
    else:
        raise RuntimeError(f'could not acquire lock {fn}')
    with os.fdopen(fd, 'w') as fh:
        fh.write(str(os.getpid()))
    try:
        yield fn
    finally:
        os.remove(fn)


class RunManifest:
    '''Append-only record of stage executions, artifacts and their checksums.'''

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.fn = os.path.join(out_dir, MANIFEST)
        self.records = []
        if os.path.exists(self.fn):
            self.records = read_jsonl(self.fn)

    def append(self, **record):
        record = {'time': datetime.now().isoformat(timespec='seconds'), **record}
        append_jsonl([record], self.fn)
        self.records.append(record)
        return record

    def last_done(self, stage):
        '''The last successful record of the stage, or None if the stage has not been completed or failed since.'''
        for rec in reversed(self.records):
            if rec.get('stage') == stage and rec['event'] in ('done', 'failed'):
                return rec if rec['event'] == 'done' else None
        return None

    def outputs(self, stage):
        rec = self.last_done(stage)
        return {} if rec is None else rec['outputs']

    def path(self, stage, artifact):
        return os.path.join(self.out_dir, self.outputs(stage)[artifact]['path'])

    def verify(self, stage):
        '''Raises ChecksumError if an artifact of the stage differs from its recorded checksum.'''
        for artifact, info in self.outputs(stage).items():
            fn = os.path.join(self.out_dir, info['path'])
            found = sha256_path(fn) if os.path.exists(fn) else 'missing'
            if found != info['sha256']:
                raise ChecksumError(f'{stage}/{artifact} ({fn})', info['sha256'], found)

    def artifacts(self):
        '''Paths of all artifacts of the completed stages, relative to the output directory.'''
        return sorted({info['path'] for stage in {r.get('stage') for r in self.records} if stage for info in self.outputs(stage).values()})


class Pipeline:
    '''Executes the stages of a run configured by a RunConfig.

    :param config: The run configuration.
    :param progress_bar: Show progress bars of the training loops.'''

    def __init__(self, config: RunConfig, progress_bar=False):
        self.config = config
        self.out = config.output_dir
        self.progress_bar = progress_bar
        self.manifest = RunManifest(self.out)
        self._cache = {}
        torch.use_deterministic_algorithms(True, warn_only=True)

    def _run_stage(self, name, params, upstream, func, force=False):
        for up in upstream:
            self.manifest.verify(up)
        key = sha256_obj({'version': __version__, 'params': params,
                          'upstream': {up: {a: i['sha256'] for a, i in self.manifest.outputs(up).items()} for up in upstream}})
        rec = self.manifest.last_done(name)
        if rec is not None and rec['key'] == key and not force:
            self.manifest.verify(name)
            logger.info('stage %s is up to date', name)
            return rec.get('metrics', {})
        logger.info('running stage %s', name)
        self.manifest.append(stage=name, event='start', key=key)
        set_seed(self.config.seed)
        start = time.perf_counter()
        try:
            outputs, metrics = func()
        except Exception as e:
            self.manifest.append(stage=name, event='failed', key=key, error=f'{type(e).__name__}: {e}')
            raise
        outputs = {a: {'path': os.path.relpath(p, self.out), 'sha256': sha256_path(p)} for a, p in outputs.items()}
        self.manifest.append(stage=name, event='done', key=key, outputs=outputs, metrics=metrics, seconds=time.perf_counter() - start)
        for k in [k for k in self._cache if k.startswith(name)]:
            del self._cache[k]
        logger.info('stage %s finished in %.1f s', name, time.perf_counter() - start)
        return metrics

    def _path(self, *parts):
        return os.path.join(self.out, *parts)

    # corpus

    def _stage_corpus(self):
        cfg = self.config.corpus
        planted = None
        if cfg.toy is not None:
            if cfg.toy == 'default':
                spec = ToyCorpusSpec.from_dict(dict(DEFAULT_TOY_SPEC, seed=self.config.seed))
            else:
                spec = ToyCorpusSpec.from_yaml(cfg.toy)
            corpus, planted = generate_toy_corpus(spec)
        else:
            labels = cfg.labels or read_label_names(cfg.path)
            loader = load_pair_corpus if cfg.pair else load_corpus
            corpus = loader(cfg.path, labels, cfg.reference_file)
        write_corpus(corpus, self._path('corpus'), planted)
        vocab = build_vocab(corpus, cfg.min_freq)
        vocab.save(self._path('vocab.json'))
        stats = corpus.stats()
        logger.info('corpus statistics:\n%s', stats.to_string())
        return {'corpus': self._path('corpus'), 'vocab': self._path('vocab.json')}, {'examples': stats.to_dict()}

    def corpus_stage(self):
        cfg = self.config.corpus
        inputs = {k: sha256_path(p) for k, p in (('path', cfg.path), ('reference_file', cfg.reference_file),
                                                  ('toy', None if cfg.toy == 'default' else cfg.toy)) if p is not None}
        return self._run_stage('corpus', {'corpus': self.config.to_dict()['corpus'], 'seed': self.config.seed, 'inputs': inputs},
                               [], self._stage_corpus)

    @property
    def corpus(self) -> Corpus:
        if 'corpus' not in self._cache:
            path = self.manifest.path('corpus', 'corpus')
            ref = os.path.join(path, 'test.ref')
            self._cache['corpus'] = load_corpus(path, read_label_names(path), ref if os.path.exists(ref) else None)
        return self._cache['corpus']

    @property
    def vocab(self) -> Vocabulary:
        if 'corpus-vocab' not in self._cache:
            self._cache['corpus-vocab'] = Vocabulary.load(self.manifest.path('corpus', 'vocab'))
        return self._cache['corpus-vocab']

    @property
    def planted(self):
        fn = os.path.join(self.manifest.path('corpus', 'corpus'), 'planted.tsv')
        return read_planted(fn) if os.path.exists(fn) else None

    # attribution

    def _attr_config(self, lambda_con):
        a = self.config.attribution
        return DiversityLstmConfig(lambda_con, a.epochs, a.lr, a.hidden_size, a.embedding_dim, a.batch_size, self.config.seed)

    def attribution_stage(self, vanilla=False):
        '''Trains the attribution classifier; with vanilla=True the lambda_con=0 model used for VA.'''
        name = 'train-attr-vanilla' if vanilla else 'train-attr'
        lambda_con = 0.0 if vanilla else self.config.attribution.lambda_con
        out_dir = self._path('attribution-vanilla' if vanilla else 'attribution')

        def run():
            model = train_diversity_lstm(self.corpus, lambda_con, self.config.attribution.epochs, self.config.seed, self.vocab,
                                         self._attr_config(lambda_con), self.progress_bar)
            model.save(out_dir)
            return {'model': out_dir}, model.metrics
        return self._run_stage(name, {'attribution': self._attr_config(lambda_con).__dict__}, ['corpus'], run)

    def attribution_model(self, vanilla=False) -> DiversityLstmModel:
        name = 'train-attr-vanilla' if vanilla else 'train-attr'
        if name not in self._cache:
            self._cache[name] = DiversityLstmModel.load(self.manifest.path(name, 'model'))
        return self._cache[name]

    def attributor(self, method=None) -> Attributor:
        a = self.config.attribution
        method = AttributionMethod(method or a.method, a.ig_steps, a.ig_baseline)
        return Attributor(method, self.attribution_model(vanilla=method.tag == 'VA' and self._needs_vanilla()))

    # masking

    def _stage_mask(self):
        attributor = self.attributor()
        lambda_eps = self.config.masking.lambda_eps
        outputs, metrics = {}, {}
        planted = self.planted
        for split in SPLITS:
            masked = mask_corpus(self.corpus, attributor, lambda_eps, split=split, progress_bar=self.progress_bar)
            fn = self._path('masked', f'{split}.tsv')
            write_masked(masked, fn)
            outputs[split] = fn
            if planted is not None and masked:
                p, r, f = masking_f1(masked, planted[split])
                metrics[split] = {'precision': p, 'recall': r, 'f1': f}
                logger.info('planted style tokens in %s split: precision=%.3f recall=%.3f F1=%.3f', split, p, r, f)
        return outputs, metrics

    def _needs_vanilla(self):
        return self.config.attribution.method == 'VA' and self.config.attribution.lambda_con > 0

    def mask_stage(self):
        if self._needs_vanilla():
            self.attribution_stage(vanilla=True)
        upstream = ['corpus', 'train-attr'] + (['train-attr-vanilla'] if self._needs_vanilla() else [])
        return self._run_stage('mask', {'masking': self.config.to_dict()['masking'], 'attribution': self.config.to_dict()['attribution']},
                               upstream, self._stage_mask)

    def masked(self, split):
        key = f'mask-{split}'
        if key not in self._cache:
            self._cache[key] = read_masked(self.manifest.path('mask', split), self.corpus[split])
        return self._cache[key]

    # style masked language model

    def _bootstrap_params(self):
        d = self.config.to_dict()['smlm']
        return {k: v for k, v in d.items() if k not in FINETUNE_KEYS}

    def _stage_bootstrap(self):
        model = build_smlm(self.config.smlm, self.vocab)
        bootstrap_train(model, self.masked('train'), self.config.smlm, self.progress_bar)
        out_dir = self._path('smlm-bootstrap')
        save_smlm(model, out_dir)
        last = model.history[-1] if model.history else {}
        return {'model': out_dir}, {'n_parameters': model.n_parameters, **{k: last.get(k) for k in ('loss', 'masked_accuracy', 'unmasked_accuracy')}}

    def bootstrap_stage(self):
        return self._run_stage('train-smlm', {'smlm': self._bootstrap_params()}, ['corpus', 'mask'], self._stage_bootstrap)

    def _stage_finetune(self):
        model, _ = load_smlm(self.manifest.path('train-smlm', 'model'))
        out_dir = self._path('smlm')
        model, head = finetune(model, None, self.masked('train'), self.config.smlm, checkpoint_dir=self._path('smlm-last-good'),
                               progress_bar=self.progress_bar)
        save_smlm(model, out_dir, head)
        last = model.history[-1] if model.history else {}
        return {'model': out_dir}, {k: last.get(k) for k in ('loss', 'head_loss', 'adversarial_loss')}

    def finetune_stage(self):
        return self._run_stage('finetune', {'smlm': self.config.to_dict()['smlm']}, ['train-smlm'], self._stage_finetune)

    # transfer

    def transfer_examples(self):
        examples = list(self.corpus['test'])
        n = self.config.eval.max_examples
        return examples[:n] if n is not None else examples

    def _transfer_jobs(self):
        '''every test example to every other style'''
        labels = self.corpus.labels
        return [(i, ex, lab) for i, ex in enumerate(self.transfer_examples()) for lab in labels if lab != ex.label]

    def _stage_transfer(self):
        jobs = self._transfer_jobs()
        attributor = self.attributor()
        attributions = attributor([ex for _, ex, _ in jobs]) if jobs else []
        outputs = {}
        for name, stage in (('bootstrap', 'train-smlm'), ('finetuned', 'finetune')):
            model, _ = load_smlm(self.manifest.path(stage, 'model'))
            results = transfer_batch(model, [ex for _, ex, _ in jobs], None, self.config.masking.lambda_eps, [d for _, _, d in jobs],
                                     attributions=attributions)
            fn = self._path('transfer', f'{name}.tsv')
            with atomic_write(fn) as fh:
                for (i, _, dst), res in zip(jobs, results):
                    fh.write(f'{i}\t{dst.name}\t{",".join(str(p) for p in sorted(res.masked.mask_positions))}\t{res.sentence}\n')
            outputs[name] = fn
        return outputs, {'n_transfers': len(jobs)}

    def transfer_stage(self):
        return self._run_stage('transfer', {'masking': self.config.to_dict()['masking'], 'attribution': self.config.to_dict()['attribution'],
                                            'max_examples': self.config.eval.max_examples},
                               ['corpus', 'train-attr', 'train-smlm', 'finetune'], self._stage_transfer)

    def transfer_results(self, name):
        '''TransferResults read from the transfer stage ("bootstrap" or "finetuned")'''
        examples = self.transfer_examples()
        fn = self.manifest.path('transfer', name)
        results = []
        with open(fn, encoding='utf8') as fh:
            for line_no, line in enumerate(fh, start=1):
                i, dst, pos, output = line.rstrip('\n').split('\t')
                ex = examples[int(i)]
                mask = [False] * len(ex)
                for p in (int(p) for p in pos.split(',') if p):
                    mask[p] = True
                out = tuple(output.split(' '))
                if len(out) != len(ex):
                    raise CorpusFormatError('transfer output length differs from the source', fn, line_no)
                results.append(TransferResult(ex, apply_mask(ex, mask), self.corpus.label(dst), out))
        return results

    # evaluation

    def _stage_eval_classifier(self):
        clf = train_eval_classifier(self.corpus, self.config.seed, EvalClassifierConfig(epochs=self.config.eval.classifier_epochs),
                                    self.progress_bar)
        out_dir = self._path('eval-classifier')
        clf.save(out_dir)
        return {'model': out_dir}, {'dev_accuracy': clf.dev_accuracy}

    def eval_classifier_stage(self):
        return self._run_stage('train-eval-classifier', {'epochs': self.config.eval.classifier_epochs, 'seed': self.config.seed},
                               ['corpus'], self._stage_eval_classifier)

    @property
    def eval_classifier(self) -> EvalClassifier:
        if 'train-eval-classifier' not in self._cache:
            self._cache['train-eval-classifier'] = EvalClassifier.load(self.manifest.path('train-eval-classifier', 'model'))
        return self._cache['train-eval-classifier']

    def _stage_eval(self):
        clf = self.eval_classifier
        frames, metrics = [], {}
        for name, row in (('bootstrap', 'SMLM'), ('finetuned', 'SMLM-FT')):
            results = self.transfer_results(name)
            if not results:
                raise ValueError('no transfer outputs to evaluate')
            report = evaluate_transfer(clf, [r.source for r in results], [r.output for r in results], [r.dst for r in results])
            frames.append(report.to_frame(row))
            metrics[row] = report.to_dict()
        table = pd.concat(frames)
        write_report(table, self._path('report', 'eval'))
        examples = qualitative_examples(self.transfer_results('finetuned'), self.config.eval.qualitative)
        with atomic_write(self._path('report', 'qualitative.txt')) as fh:
            fh.write(examples.to_string(index=False) + '\n')
        logger.info('evaluation report:\n%s', table.to_string())
        return {'report_txt': self._path('report', 'eval.txt'), 'report_json': self._path('report', 'eval.json'),
                'qualitative': self._path('report', 'qualitative.txt')}, metrics

    def eval_stage(self):
        self.eval_classifier_stage()
        return self._run_stage('eval', {'qualitative': self.config.eval.qualitative}, ['transfer', 'train-eval-classifier'], self._stage_eval)

    def run(self, until='eval'):
        '''Runs (or resumes) the stages up to and including until.

        :return: dict with the metrics of the executed stages'''
        if until not in STAGES:
            raise ValueError(f'unknown stage {until}, must be one of {", ".join(STAGES)}')
        steps = {'corpus': self.corpus_stage, 'train-attr': self.attribution_stage, 'mask': self.mask_stage,
                 'train-smlm': self.bootstrap_stage, 'finetune': self.finetune_stage, 'transfer': self.transfer_stage, 'eval': self.eval_stage}
        metrics = {}
        for stage in STAGES[:STAGES.index(until) + 1]:
            metrics[stage] = steps[stage]()
        return metrics

    # experiments

    def _record_report(self, name, params, outputs):
        '''Records the report files of an experiment in the manifest; files of an earlier record that are not rewritten are removed.'''
        outputs = {a: {'path': os.path.relpath(p, self.out), 'sha256': sha256_path(p)} for a, p in outputs.items()}
        current = {info['path'] for info in outputs.values()}
        for info in self.manifest.outputs(name).values():
            fn = os.path.join(self.out, info['path'])
            if info['path'] not in current and os.path.isfile(fn):
                os.remove(fn)
        self.manifest.append(stage=name, event='done', key=sha256_obj({'version': __version__, 'params': params}), outputs=outputs)

    @timed
    def compare_attributions(self, lambda_eps=None, split='test'):
        '''Masking quality of all attribution methods on one split, plus the "No Masking" control row.

        :param lambda_eps: Surplus parameter used for all methods; by default the attention methods use the
            configured value and the gradient methods 0.
        :return: DataFrame with one row per method'''
        if not self.config.attribution.lambda_con > 0:
            raise ValueError('comparing attribution methods requires attribution.lambda_con > 0 for explainable attention')
        self.run('train-attr')
        self.attribution_stage(vanilla=True)
        self.eval_classifier_stage()
        clf = self.eval_classifier
        examples = list(self.corpus[split])
        a = self.config.attribution
        reports = []
        for tag in ATTRIBUTION_METHODS:
            method = AttributionMethod(tag, a.ig_steps, a.ig_baseline)
            model = self.attribution_model(vanilla=tag == 'VA')
            if lambda_eps is not None:
                eps = lambda_eps
            else:
                eps = 0.0 if tag in ('VG', 'GxX', 'IG') else self.config.masking.lambda_eps
            masked = mask_corpus(examples, Attributor(method, model), eps, progress_bar=self.progress_bar)
            reports.append(mask_quality(clf, masked, examples, tag))
        reports.append(no_masking_report(clf, examples))
        table = mask_quality_table(reports)
        prefix = self._path('report', 'compare_attr')
        write_report(table, prefix)
        self._record_report('compare-attr', {'lambda_eps': lambda_eps, 'split': split}, {'report_txt': prefix + '.txt', 'report_json': prefix + '.json'})
        logger.info('masking quality:\n%s', table.to_string())
        return table

    @timed
    def sweep(self, grid=None, split='test', plot_type='png'):
        '''Masking quality over a lambda_eps grid; writes report/sweep.csv and the sweep figure.'''
        grid = list(grid if grid is not None else self.config.eval.sweep_grid)
        self.run('train-attr')
        if self._needs_vanilla():
            self.attribution_stage(vanilla=True)
        self.eval_classifier_stage()
        curve = lambda_sweep(self.eval_classifier, self.corpus, self.attributor(), grid, split)
        os.makedirs(self._path('report'), exist_ok=True)
        curve.to_csv(self._path('report', 'sweep.csv'))
        f, _ = plot_sweep(curve, title=ATTRIBUTION_METHODS[self.config.attribution.method].replace('_', ' '))
        figure = self._path('report', f'sweep.{plot_type}')
        f.savefig(figure, bbox_inches='tight')
        plt.close(f)
        self._record_report('sweep', {'grid': grid, 'split': split, 'method': self.config.attribution.method},
                            {'curve': self._path('report', 'sweep.csv'), 'figure': figure})
        return curve


def gen_toy(spec_fn, out_dir):
    '''Generates a toy corpus from a spec file (default spec if None) and records it in the manifest of out_dir.

    :return: list of written files'''
    spec = ToyCorpusSpec.from_yaml(spec_fn) if spec_fn is not None else ToyCorpusSpec.from_dict(dict(DEFAULT_TOY_SPEC))
    corpus, planted = generate_toy_corpus(spec)
    written = write_corpus(corpus, out_dir, planted)
    manifest = RunManifest(out_dir)
    manifest.append(stage='gen-toy', event='done', key=sha256_obj(spec.__dict__),
                    outputs={os.path.basename(fn): {'path': os.path.basename(fn), 'sha256': sha256_path(fn)} for fn in written})
    return written


def read_transfer_input(fn, labels) -> list:
    '''Reads "<label><TAB><tokens>" lines, the label given by id or by name.'''
    examples = []
    with open(fn, encoding='utf8') as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip('\r\n')
            if not line:
                continue
            fields = line.split('\t')
            if len(fields) != 2:
                raise CorpusFormatError(f'expected 2 tab separated fields, found {len(fields)}', fn, line_no)
            lab = next((lab for lab in labels if fields[0] in (lab.name, str(lab.id))), None)
            if lab is None:
                raise CorpusFormatError(f'unknown label "{fields[0]}"', fn, line_no)
            try:
                examples.append(LabeledExample(fields[1].split(' '), lab))
            except ValueError as e:
                raise CorpusFormatError(str(e), fn, line_no) from None
    return examples


@traceback
def transfer_file(model_dir, attr_dir, input_fn, dst, out_fn, lambda_eps=None, method=None):
    '''Transfers the sentences of input_fn to style dst and writes one output sentence per input line.'''
    model, _ = load_smlm(model_dir)
    attr_model = DiversityLstmModel.load(attr_dir)
    labels = list(attr_model.labels)
    if len(labels) != model.n_styles:
        raise ValueError(f'attribution model has {len(labels)} styles, the language model {model.n_styles}')
    dst_label = next((lab for lab in labels if dst in (lab.name, str(lab.id))), None)
    if dst_label is None:
        raise ValueError(f'unknown destination style "{dst}", must be one of {", ".join(lab.name for lab in labels)}')
    tag = method or ('EA' if attr_model.is_diversity_trained else 'VA')
    if lambda_eps is None:
        lambda_eps = 0.0 if tag in ('VG', 'GxX', 'IG') else 0.15
    examples = read_transfer_input(input_fn, labels)
    results = transfer_batch(model, examples, Attributor(AttributionMethod(tag), attr_model), lambda_eps, dst_label)
    with atomic_write(out_fn) as fh:
        for res in results:
            fh.write(res.sentence + '\n')
    logger.info('wrote %s transferred sentences to %s', len(results), out_fn)
    return results
