'''Run configuration.

A run is configured by a single YAML document with the sections corpus, attribution, masking, smlm and eval,
and the top level keys output_dir and seed. Any setting can be overridden by environment variables
STYLEMLM_<SECTION>__<KEY> (e.g. STYLEMLM_SMLM__BOOTSTRAP_EPOCHS=3) or STYLEMLM_<KEY> for top level keys;
their values are parsed as YAML scalars.'''

import os
import logging
from dataclasses import dataclass, field, fields, asdict
from typing import Optional

import yaml

from .smlm import SmlmConfig
from .attribution import AttributionMethod, GRADIENT_METHODS
from .masking import MaskPolicyConfig
from .evaluation import check_grid

logger = logging.getLogger('stylemlm')

ENV_PREFIX = 'STYLEMLM_'

DATASET_PRESETS = {'yelp': {'lambda_con': 10.0, 'lambda_eps': 0.15},
                   'imdb': {'lambda_con': 10.0, 'lambda_eps': 0.15},
                   'amazon': {'lambda_con': 20.0, 'lambda_eps': 0.15},
                   'snli': {'lambda_con': 10.0, 'lambda_eps': 0.5}}


def _from_dict(cls, d, section):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ValueError(f'config section "{section}" must be a key-value mapping')
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f'unknown config key(s) in section "{section}": {", ".join(unknown)}')
    return cls(**d)


@dataclass
class CorpusSettings:
    '''Either path (a directory with train/dev/test TSV files) or toy (a toy corpus spec file, or "default") must be given.'''
    path: Optional[str] = None
    labels: Optional[list] = None
    reference_file: Optional[str] = None
    pair: bool = False
    toy: Optional[str] = None
    min_freq: Optional[int] = None
    preset: Optional[str] = None


@dataclass
class AttributionSettings:
    method: str = 'EA'
    lambda_con: Optional[float] = None
    epochs: int = 10
    hidden_size: int = 128
    embedding_dim: int = 128
    lr: float = 1e-3
    batch_size: int = 32
    ig_steps: int = 50
    ig_baseline: str = 'zero'


@dataclass
class MaskingSettings:
    lambda_eps: Optional[float] = None


@dataclass
class EvalSettings:
    classifier_epochs: int = 5
    sweep_grid: list = field(default_factory=lambda: [0.0, 0.15, 0.3, 0.5, 1.0])
    max_examples: Optional[int] = None
    qualitative: int = 5


@dataclass
class RunConfig:
    '''Configuration of a pipeline run; the seed propagates to all stages.'''
    output_dir: str
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    attribution: AttributionSettings = field(default_factory=AttributionSettings)
    masking: MaskingSettings = field(default_factory=MaskingSettings)
    smlm: SmlmConfig = field(default_factory=SmlmConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    seed: int = 0

    SECTIONS = {'corpus': CorpusSettings, 'attribution': AttributionSettings, 'masking': MaskingSettings,
                'smlm': SmlmConfig, 'eval': EvalSettings}

    @classmethod
    def from_dict(cls, d, base_dir='.'):
        '''Creates and validates a RunConfig; relative paths are interpreted relative to base_dir.'''
        if not isinstance(d, dict):
            raise ValueError('run config must be a key-value document')
        unknown = sorted(set(d) - set(cls.SECTIONS) - {'output_dir', 'seed'})
        if unknown:
            raise ValueError(f'unknown config key(s): {", ".join(unknown)}')
        if 'output_dir' not in d:
            raise ValueError('missing config key "output_dir"')
        seed = int(d.get('seed', 0))
        sections = {name: _from_dict(sec_cls, d.get(name), name) for name, sec_cls in cls.SECTIONS.items() if name != 'smlm'}
        smlm = d.get('smlm') or {}
        if not isinstance(smlm, dict):
            raise ValueError('config section "smlm" must be a key-value mapping')
        sections['smlm'] = SmlmConfig.from_dict({**smlm, 'seed': seed})
        cfg = cls(output_dir=_abspath(d['output_dir'], base_dir), seed=seed, **sections)
        for key in ('path', 'reference_file'):
            if getattr(cfg.corpus, key) is not None:
                setattr(cfg.corpus, key, _abspath(getattr(cfg.corpus, key), base_dir))
        if cfg.corpus.toy not in (None, 'default'):
            cfg.corpus.toy = _abspath(cfg.corpus.toy, base_dir)
        cfg.resolve()
        cfg.validate()
        return cfg

    def resolve(self):
        '''Fills settings left open from the dataset preset and the method defaults.'''
        if self.corpus.min_freq is None:
            self.corpus.min_freq = 2 if self.corpus.toy is not None else 5
        preset = DATASET_PRESETS.get(self.corpus.preset, {}) if self.corpus.preset else {}
        tag = AttributionMethod(self.attribution.method).tag
        self.attribution.method = tag
        if self.attribution.lambda_con is None:
            self.attribution.lambda_con = 0.0 if tag == 'VA' else preset.get('lambda_con', 10.0)
        if self.masking.lambda_eps is None:
            if tag in GRADIENT_METHODS:
                self.masking.lambda_eps = 0.0
            elif 'lambda_eps' in preset:
                self.masking.lambda_eps = preset['lambda_eps']
            else:
                self.masking.lambda_eps = MaskPolicyConfig.default_for(tag, self.corpus.pair).lambda_eps

    def validate(self):
        '''Raises ValueError or FileNotFoundError for inconsistent settings and missing input files.'''
        if self.corpus.preset is not None and self.corpus.preset not in DATASET_PRESETS:
            raise ValueError(f'unknown dataset preset "{self.corpus.preset}", must be one of {", ".join(DATASET_PRESETS)}')
        if (self.corpus.path is None) == (self.corpus.toy is None):
            raise ValueError('exactly one of corpus.path and corpus.toy must be given')
        for path in (self.corpus.path, self.corpus.reference_file, None if self.corpus.toy == 'default' else self.corpus.toy):
            if path is not None and not os.path.exists(path):
                raise FileNotFoundError(f'no such file or directory: {path}')
        AttributionMethod(self.attribution.method, self.attribution.ig_steps, self.attribution.ig_baseline)
        if self.attribution.method == 'EA' and not self.attribution.lambda_con > 0:
            raise ValueError('explainable attention (EA) requires attribution.lambda_con > 0')
        if self.attribution.lambda_con < 0:
            raise ValueError(f'attribution.lambda_con must be >= 0, got {self.attribution.lambda_con}')
        MaskPolicyConfig(self.masking.lambda_eps)
        check_grid(self.eval.sweep_grid)
        if self.eval.max_examples is not None and self.eval.max_examples < 1:
            raise ValueError(f'eval.max_examples must be positive, got {self.eval.max_examples}')

    def to_dict(self):
        d = {name: asdict(getattr(self, name)) for name in self.SECTIONS}
        d.update(output_dir=self.output_dir, seed=self.seed)
        return d


def _abspath(path, base_dir):
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def apply_env_overrides(d, environ=None):
    '''Applies STYLEMLM_ environment variables to the config dict d (in place).

    :return: list of the applied override names'''
    environ = os.environ if environ is None else environ
    applied = []
    for var in sorted(environ):
        if not var.startswith(ENV_PREFIX):
            continue
        key = var[len(ENV_PREFIX):].lower()
        value = yaml.safe_load(environ[var]) if environ[var] != '' else None
        if '__' in key:
            section, key = key.split('__', 1)
            if not isinstance(d.get(section), dict):
                d[section] = {} if d.get(section) is None else d[section]
            d[section][key] = value
        else:
            d[key] = value
        applied.append(var)
    if applied:
        logger.info('config overrides from environment: %s', ', '.join(applied))
    return applied


def load_config(fn, environ=None) -> RunConfig:
    '''Reads a run config YAML file and applies environment overrides.'''
    with open(fn, encoding='utf8') as fh:
        d = yaml.safe_load(fh) or {}
    if not isinstance(d, dict):
        raise ValueError(f'run config {fn} must be a key-value document')
    apply_env_overrides(d, environ)
    return RunConfig.from_dict(d, base_dir=os.path.dirname(os.path.abspath(fn)))
