"""
stylemlm: Python package for unsupervised text style transfer with a style masked language model.

.. data:: DEFAULT_TOY_SPEC

    Definition of the default synthetic corpus with planted style tokens, as used in stylemlm.generate_toy_corpus().

.. data:: DEFAULT_LAMBDA_EPS

    Default masking surplus parameters for word level style corpora, sentence pair corpora and gradient based attribution.

.. data:: DATASET_PRESETS

    Recommended hyperparameters (lambda_con, lambda_eps) for the yelp, imdb, amazon and snli corpora.

.. data:: ATTRIBUTION_METHODS

    Tags and names of the attribution methods.
"""


from importlib.metadata import distribution
__version__ = distribution('stylemlm').version
from ._utils import CorpusFormatError, TrainingError, ChecksumError, IncompatibleModelError
from .corpus import StyleLabel, LabeledExample, Corpus, Vocabulary, ToyCorpusSpec, DEFAULT_TOY_SPEC, \
    load_corpus, load_pair_corpus, write_corpus, build_vocab, encode, decode, generate_toy_corpus
from .attribution import AttributionMethod, AttributionVector, Attributor, DiversityLstmModel, ATTRIBUTION_METHODS, \
    train_diversity_lstm, atm, conicity, attribute
from .masking import MaskPolicyConfig, StyleMaskedSentence, DEFAULT_LAMBDA_EPS, compute_baseline, attention_surplus_mask, \
    apply_mask, mask_corpus
from .smlm import SmlmConfig, SmlmModel, StyleClassifierHead, ControlCodes, build_smlm, smlm_forward, bootstrap_train, \
    finetune, transfer
from .evaluation import EvalClassifier, EvalReport, MaskQualityReport, SweepCurve, train_eval_classifier, tst_percent, \
    bleu, s_bleu, rouge_l, mask_quality, lambda_sweep, masking_f1
from .config import RunConfig, DATASET_PRESETS


__all__ = ['CorpusFormatError', 'TrainingError', 'ChecksumError', 'IncompatibleModelError',
           'StyleLabel', 'LabeledExample', 'Corpus', 'Vocabulary', 'ToyCorpusSpec', 'DEFAULT_TOY_SPEC',
           'load_corpus', 'load_pair_corpus', 'write_corpus', 'build_vocab', 'encode', 'decode', 'generate_toy_corpus',
           'AttributionMethod', 'AttributionVector', 'Attributor', 'DiversityLstmModel', 'ATTRIBUTION_METHODS',
           'train_diversity_lstm', 'atm', 'conicity', 'attribute',
           'MaskPolicyConfig', 'StyleMaskedSentence', 'DEFAULT_LAMBDA_EPS', 'compute_baseline', 'attention_surplus_mask',
           'apply_mask', 'mask_corpus',
           'SmlmConfig', 'SmlmModel', 'StyleClassifierHead', 'ControlCodes', 'build_smlm', 'smlm_forward', 'bootstrap_train',
           'finetune', 'transfer',
           'EvalClassifier', 'EvalReport', 'MaskQualityReport', 'SweepCurve', 'train_eval_classifier', 'tst_percent',
           'bleu', 's_bleu', 'rouge_l', 'mask_quality', 'lambda_sweep', 'masking_f1',
           'RunConfig', 'DATASET_PRESETS']
