'''Style masked language model.

A transformer encoder reconstructs a sentence from its style masked form. The input is the masked
sentence followed by two control codes, <src_s> and <dst_t>. With s = t the model is trained to
restore the original sentence (bootstrap); with s != t it fills the masked positions with tokens of
style t. Fine-tuning adds a style classifier head, trained adversarially against the transfer outputs.'''

import os
import json
import copy
import time
import logging
from dataclasses import dataclass, asdict, fields
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from .corpus import LabeledExample, StyleLabel, Vocabulary, encode, decode
from .masking import StyleMaskedSentence, attention_surplus_mask, apply_mask, pad_scores
from ._utils import TrainingError, IncompatibleModelError, set_seed, make_generator, batches, check_finite, \
    atomic_torch_save, atomic_write, write_json, read_json
from . import __version__

logger = logging.getLogger('stylemlm')

CHECKPOINT_FORMAT = 1
LOSS_ON = ('all', 'masked')
# steps between in-memory snapshots of the last finite state during fine-tuning
SNAPSHOT_STEPS = 50


@dataclass
class SmlmConfig:
    '''Hyperparameters of the style masked language model and its training.

    :param layers: Number of transformer encoder layers.
    :param heads: Number of attention heads; must divide dim.
    :param dim: Embedding dimension.
    :param ff_dim: Dimension of the feed-forward sublayers.
    :param dropout: Dropout probability.
    :param max_len: Maximum number of tokens per sentence (control codes excluded).
    :param bootstrap_epochs: Epochs of same style reconstruction training.
    :param finetune_epochs: Epochs of adversarial fine-tuning.
    :param lambda_sta: Weight of the adversarial transfer term in the fine-tuning objective.
    :param adv_head_weight: Weight of the transfer term relative to the reconstruction term in the classifier head update.
    :param clip: Gradient norm clipping threshold.
    :param lr: Learning rate of the Adam optimizers.
    :param batch_size: Sentences per mini-batch.
    :param loss_on: "all" computes the reconstruction loss over all token positions, "masked" over masked positions only.
    :param seed: Random seed for initialization and data order.'''
    layers: int = 2
    heads: int = 8
    dim: int = 512
    ff_dim: int = 2048
    dropout: float = 0.1
    max_len: int = 64
    bootstrap_epochs: int = 15
    finetune_epochs: int = 1
    lambda_sta: float = 1.0
    adv_head_weight: float = 1.0
    clip: float = 1e-3
    lr: float = 1e-4
    batch_size: int = 32
    loss_on: str = 'all'
    seed: int = 0

    def __post_init__(self):
        for name in ('layers', 'heads', 'dim', 'ff_dim', 'max_len', 'batch_size'):
            if getattr(self, name) < 1:
                raise ValueError(f'{name} must be positive, got {getattr(self, name)}')
        for name in ('bootstrap_epochs', 'finetune_epochs'):
            if getattr(self, name) < 0:
                raise ValueError(f'{name} must be >= 0, got {getattr(self, name)}')
        if self.dim % self.heads:
            raise ValueError(f'embedding dim {self.dim} is not divisible by the number of heads {self.heads}')
        if not 0 <= self.dropout < 1:
            raise ValueError(f'dropout must be in [0, 1), got {self.dropout}')
        if self.lambda_sta < 0 or self.adv_head_weight < 0:
            raise ValueError('lambda_sta and adv_head_weight must be >= 0')
        if self.clip <= 0 or self.lr <= 0:
            raise ValueError('clip and lr must be positive')
        if self.loss_on not in LOSS_ON:
            raise ValueError(f'loss_on must be one of {LOSS_ON}, got {self.loss_on}')

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f'unknown smlm setting(s): {", ".join(sorted(unknown))}')
        return cls(**d)


@dataclass(frozen=True)
class ControlCodes:
    '''Source and destination style; src == dst selects same style reconstruction, src != dst transfer.'''
    src: StyleLabel
    dst: StyleLabel

    @property
    def is_transfer(self):
        return self.src != self.dst


class SmlmModel(nn.Module):
    '''Transformer encoder with token and position embeddings and an output projection tied to the token embeddings.'''

    def __init__(self, config: SmlmConfig, vocab: Vocabulary):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.token_emb = nn.Embedding(len(vocab), config.dim, padding_idx=vocab.pad_id)
        # two extra positions for the control codes
        self.pos_emb = nn.Embedding(config.max_len + 2, config.dim)
        layer = nn.TransformerEncoderLayer(config.dim, config.heads, config.ff_dim, config.dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(config.dim)
        self.out_bias = nn.Parameter(torch.zeros(len(vocab)))
        self.history = []

    @property
    def n_parameters(self):
        return sum(p.numel() for p in self.parameters())

    @property
    def n_styles(self):
        return self.vocab.n_styles

    def forward(self, ids, mask, src, dst):
        '''Vocabulary logits for the token positions.

        :param ids: masked token ids [B x T], right padded
        :param mask: boolean mask [B x T], True at real tokens
        :param src: source style ids [B]
        :param dst: destination style ids [B]
        :return: logits [B x T x V]'''
        B, T = ids.shape
        if T > self.config.max_len:
            raise ValueError(f'sequence of length {T} exceeds max_len={self.config.max_len}')
        if (src >= self.n_styles).any() or (dst >= self.n_styles).any() or (src < 0).any() or (dst < 0).any():
            raise ValueError(f'style ids must be in [0, {self.n_styles})')
        codes = torch.stack([self.vocab.src_id(0) + src, self.vocab.dst_id(0) + dst], dim=1)
        x = torch.cat([ids, codes], dim=1)
        lengths = mask.sum(1, keepdim=True)
        # control codes follow the last real token
        pos = torch.cat([torch.arange(T).expand(B, T), lengths, lengths + 1], dim=1)
        key_padding = torch.cat([~mask, torch.zeros(B, 2, dtype=torch.bool)], dim=1)
        h = self.encoder(self.token_emb(x) + self.pos_emb(pos), src_key_padding_mask=key_padding)
        h = self.norm(h[:, :T])
        return h @ self.token_emb.weight.T + self.out_bias


class StyleClassifierHead(nn.Module):
    '''Affine map from the mean of the (soft) token embeddings of a sentence to style logits.'''

    def __init__(self, dim, n_styles):
        super().__init__()
        self.linear = nn.Linear(dim, n_styles)

    def forward(self, features):
        return self.linear(features)


def build_smlm(config: SmlmConfig, vocab: Vocabulary) -> SmlmModel:
    '''Initializes a style masked language model; deterministic given config.seed.'''
    if vocab.n_styles < 2:
        raise IncompatibleModelError('vocabulary has no control codes for two or more styles')
    set_seed(config.seed)
    model = SmlmModel(config, vocab)
    logger.info('built style masked language model with %s parameters (%s layers, %s heads, dim %s)',
                f'{model.n_parameters:,}', config.layers, config.heads, config.dim)
    return model


def build_head(model: SmlmModel) -> StyleClassifierHead:
    return StyleClassifierHead(model.config.dim, model.n_styles)


def _code_ids(codes):
    return torch.tensor([int(getattr(s, 'id', s)) for s in codes], dtype=torch.long)


class _Batch:
    '''Tensors of a mini-batch of masked sentences.'''

    def __init__(self, masked: Sequence[StyleMaskedSentence], vocab: Vocabulary, max_len: int):
        for m in masked:
            if len(m) > max_len:
                raise ValueError(f'sentence of length {len(m)} exceeds max_len={max_len}')
        T = max(len(m) for m in masked)
        self.ids = torch.full((len(masked), T), vocab.pad_id, dtype=torch.long)
        self.target = torch.full((len(masked), T), vocab.pad_id, dtype=torch.long)
        self.mask = torch.zeros((len(masked), T), dtype=torch.bool)
        self.masked_pos = torch.zeros((len(masked), T), dtype=torch.bool)
        for i, m in enumerate(masked):
            n = len(m)
            self.ids[i, :n] = torch.tensor(encode(m.tokens, vocab))
            self.target[i, :n] = torch.tensor(encode(m.original.tokens, vocab))
            self.mask[i, :n] = True
            self.masked_pos[i, list(m.mask_positions)] = True
        self.src = _code_ids(m.source_style for m in masked)


def _reconstruction_loss(logits, batch: _Batch, loss_on):
    '''mean token NLL over real (or masked) positions, and the per position correctness'''
    nll = nn.functional.cross_entropy(logits.transpose(1, 2), batch.target, reduction='none')
    sel = batch.mask if loss_on == 'all' else batch.masked_pos
    loss = (nll * sel).sum() / sel.sum().clamp(min=1)
    return loss, logits.argmax(-1) == batch.target


def _soft_features(model: SmlmModel, logits, batch: _Batch):
    '''mean over the token positions of the soft embedding mixture; unmasked positions use the copied source tokens'''
    emb = model.token_emb.weight.detach()
    mix = torch.softmax(logits, -1) @ emb
    hard = emb[batch.target]
    feats = torch.where(batch.masked_pos.unsqueeze(-1), mix, hard) * batch.mask.unsqueeze(-1)
    return feats.sum(1) / batch.mask.sum(1, keepdim=True)


def _other_styles(src, n_styles, gen):
    shift = torch.randint(1, n_styles, src.shape, generator=gen)
    return (src + shift) % n_styles


def _check_model(model, epoch, step, head=None, last_good=None, checkpoint_dir=None):
    if check_finite(model) and (head is None or check_finite(head)):
        return
    path = None
    if last_good is not None:
        model.load_state_dict(last_good[0])
        if head is not None:
            head.load_state_dict(last_good[1])
        if checkpoint_dir is not None:
            path = save_smlm(model, checkpoint_dir, head)
    raise TrainingError(f'non-finite parameters in epoch {epoch}, step {step}', epoch=epoch, step=step, checkpoint=path)


def _epoch_record(phase, epoch, losses, correct_masked, n_masked, correct_unmasked, n_unmasked, start, **extra):
    rec = {'phase': phase, 'epoch': epoch, 'loss': float(np.mean(losses)) if losses else float('nan'),
           'masked_accuracy': correct_masked / n_masked if n_masked else float('nan'),
           'unmasked_accuracy': correct_unmasked / n_unmasked if n_unmasked else float('nan'),
           'seconds': time.perf_counter() - start}
    rec.update(extra)
    return rec


def bootstrap_train(model: SmlmModel, masked_pairs: Sequence[StyleMaskedSentence], config: Optional[SmlmConfig] = None,
                    progress_bar=False) -> SmlmModel:
    '''Trains same style reconstruction of the original sentences from their masked form, with src = dst = source style.

    :param model: The model, as returned by build_smlm.
    :param masked_pairs: Masked sentences; the originals are the reconstruction targets.
    :param config: Training settings, defaults to model.config.
    :return: The trained model; per epoch loss, masked/unmasked token accuracy and timing are appended to model.history.'''
    config = config or model.config
    if not masked_pairs:
        raise ValueError('no training data')
    gen = make_generator(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    logger.info('bootstrap training on %s sentences for %s epochs', len(masked_pairs), config.bootstrap_epochs)
    for epoch in range(1, config.bootstrap_epochs + 1):
        start = time.perf_counter()
        model.train()
        order = torch.randperm(len(masked_pairs), generator=gen).tolist()
        losses, cm, nm, cu, nu = [], 0, 0, 0, 0
        for step, idx in enumerate(tqdm(list(batches(order, config.batch_size)), disable=not progress_bar, unit=' batches', desc=f'bootstrap {epoch}')):
            batch = _Batch([masked_pairs[i] for i in idx], model.vocab, config.max_len)
            logits = model(batch.ids, batch.mask, batch.src, batch.src)
            loss, correct = _reconstruction_loss(logits, batch, config.loss_on)
            if not torch.isfinite(loss):
                raise TrainingError(f'non-finite loss in bootstrap epoch {epoch}, step {step}', epoch=epoch, step=step)
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.clip)
            optimizer.step()
            losses.append(loss.item())
            unmasked = batch.mask & ~batch.masked_pos
            cm += (correct & batch.masked_pos).sum().item()
            nm += batch.masked_pos.sum().item()
            cu += (correct & unmasked).sum().item()
            nu += unmasked.sum().item()
        _check_model(model, epoch, step)
        rec = _epoch_record('bootstrap', epoch, losses, cm, nm, cu, nu, start)
        model.history.append(rec)
        logger.info('bootstrap epoch %s: loss=%.4f masked accuracy=%.4f unmasked accuracy=%.4f (%.1f s)',
                    epoch, rec['loss'], rec['masked_accuracy'], rec['unmasked_accuracy'], rec['seconds'])
    model.eval()
    return model


def finetune(model: SmlmModel, head: Optional[StyleClassifierHead], masked_pairs: Sequence[StyleMaskedSentence],
             config: Optional[SmlmConfig] = None, checkpoint_dir=None, progress_bar=False):
    '''Adversarial fine-tuning for the destination style.

    Per mini-batch, the classifier head is updated to recognize the source style both on same style
    reconstructions and on transfer outputs. Then the model is updated to minimize the reconstruction loss
    plus lambda_sta times the head's loss for the destination style on the transfer outputs. Transfer outputs
    enter the head as soft embedding mixtures at the masked positions.

    :param model: A bootstrapped model.
    :param head: The classifier head, a new head is created if None.
    :param masked_pairs: Masked sentences with their originals.
    :param config: Training settings, defaults to model.config.
    :param checkpoint_dir: If given, the last finite state is saved there when training diverges.
    :return: Tuple (model, head).'''
    config = config or model.config
    if not masked_pairs:
        raise ValueError('no training data')
    if not check_finite(model):
        raise TrainingError('model has non-finite parameters before fine-tuning')
    if head is None:
        set_seed(config.seed)
        head = build_head(model)
    gen = make_generator(config.seed + 1)
    opt_model = torch.optim.Adam(model.parameters(), lr=config.lr)
    opt_head = torch.optim.Adam(head.parameters(), lr=config.lr)
    logger.info('fine-tuning on %s sentences for %s epochs (lambda_sta=%s)', len(masked_pairs), config.finetune_epochs, config.lambda_sta)
    for epoch in range(1, config.finetune_epochs + 1):
        start = time.perf_counter()
        model.train()
        head.train()
        order = torch.randperm(len(masked_pairs), generator=gen).tolist()
        losses, head_losses, adv_losses, cm, nm, cu, nu = [], [], [], 0, 0, 0, 0
        last_good = (copy.deepcopy(model.state_dict()), copy.deepcopy(head.state_dict()))
        for step, idx in enumerate(tqdm(list(batches(order, config.batch_size)), disable=not progress_bar, unit=' batches', desc=f'finetune {epoch}')):
            batch = _Batch([masked_pairs[i] for i in idx], model.vocab, config.max_len)
            dst = _other_styles(batch.src, model.n_styles, gen)
            # classifier head
            with torch.no_grad():
                rec_feats = _soft_features(model, model(batch.ids, batch.mask, batch.src, batch.src), batch)
                tr_feats = _soft_features(model, model(batch.ids, batch.mask, batch.src, dst), batch)
            loss_head = nn.functional.cross_entropy(head(rec_feats), batch.src) + \
                config.adv_head_weight * nn.functional.cross_entropy(head(tr_feats), batch.src)
            opt_head.zero_grad()
            loss_head.backward()
            nn.utils.clip_grad_norm_(head.parameters(), config.clip)
            opt_head.step()
            # language model
            logits = model(batch.ids, batch.mask, batch.src, batch.src)
            loss, correct = _reconstruction_loss(logits, batch, config.loss_on)
            loss_adv = torch.zeros(())
            if config.lambda_sta > 0:
                tr_feats = _soft_features(model, model(batch.ids, batch.mask, batch.src, dst), batch)
                loss_adv = nn.functional.cross_entropy(head(tr_feats), dst)
            total = loss + config.lambda_sta * loss_adv
            if not torch.isfinite(total):
                model.load_state_dict(last_good[0])
                head.load_state_dict(last_good[1])
                path = save_smlm(model, checkpoint_dir, head) if checkpoint_dir is not None else None
                raise TrainingError(f'non-finite loss in fine-tuning epoch {epoch}, step {step}', epoch=epoch, step=step, checkpoint=path)
            opt_model.zero_grad()
            total.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.clip)
            opt_model.step()
            _check_model(model, epoch, step, head, last_good, checkpoint_dir)
            if step % SNAPSHOT_STEPS == 0:
                last_good = (copy.deepcopy(model.state_dict()), copy.deepcopy(head.state_dict()))
            losses.append(loss.item())
            head_losses.append(loss_head.item())
            adv_losses.append(loss_adv.item())
            unmasked = batch.mask & ~batch.masked_pos
            cm += (correct & batch.masked_pos).sum().item()
            nm += batch.masked_pos.sum().item()
            cu += (correct & unmasked).sum().item()
            nu += unmasked.sum().item()
        rec = _epoch_record('finetune', epoch, losses, cm, nm, cu, nu, start,
                            head_loss=float(np.mean(head_losses)), adversarial_loss=float(np.mean(adv_losses)))
        model.history.append(rec)
        logger.info('fine-tuning epoch %s: loss=%.4f head loss=%.4f adversarial loss=%.4f (%.1f s)',
                    epoch, rec['loss'], rec['head_loss'], rec['adversarial_loss'], rec['seconds'])
    model.eval()
    head.eval()
    return model, head


@torch.no_grad()
def smlm_forward_batch(model: SmlmModel, masked: Sequence[StyleMaskedSentence], codes: Sequence[ControlCodes]) -> list:
    '''Per position probability distributions over the vocabulary for a list of masked sentences.

    :return: list of [n x V] arrays, one per sentence, n being its number of tokens'''
    if len(masked) != len(codes):
        raise ValueError(f'{len(codes)} control codes given for {len(masked)} sentences')
    if not masked:
        return []
    model.eval()
    batch = _Batch(masked, model.vocab, model.config.max_len)
    src = _code_ids(c.src for c in codes)
    dst = _code_ids(c.dst for c in codes)
    probs = torch.softmax(model(batch.ids, batch.mask, src, dst).double(), -1).numpy()
    return [p[:len(m)] for p, m in zip(probs, masked)]


def smlm_forward(model: SmlmModel, masked: StyleMaskedSentence, codes: ControlCodes) -> np.ndarray:
    '''Per position probability distributions [n x V] of one masked sentence under the control codes.'''
    return smlm_forward_batch(model, [masked], [codes])[0]


@dataclass(frozen=True)
class TransferResult:
    '''Source example, its style masked form and the transferred sentence.'''
    source: LabeledExample
    masked: StyleMaskedSentence
    dst: StyleLabel
    output: tuple

    @property
    def sentence(self):
        return ' '.join(self.output)


def _decode_positions(model, probs, masked, copy_through):
    scores = probs.copy()
    # reserved tokens are never produced
    scores[:, :model.vocab.n_reserved] = -1
    best = scores.argmax(-1)
    decoded = decode(best, model.vocab)
    if not copy_through:
        return tuple(decoded)
    return tuple(decoded[i] if i in masked.mask_positions else tok for i, tok in enumerate(masked.original.tokens))


def transfer_batch(model: SmlmModel, examples: Sequence[LabeledExample], attributor, lambda_eps, dst, copy_through=True,
                   attributions=None, batch_size=256) -> list:
    '''Transfers examples to the destination style(s).

    :param model: A trained model.
    :param examples: The source examples.
    :param attributor: Callable returning AttributionVectors for a list of examples.
    :param lambda_eps: The masking policy parameter.
    :param dst: A StyleLabel, or a sequence of StyleLabels aligned with the examples.
    :param copy_through: If True, unmasked tokens are copied from the source; otherwise every position is decoded.
    :param attributions: Precomputed attribution vectors aligned with the examples.
    :return: list of TransferResults'''
    examples = list(examples)
    dsts = [dst] * len(examples) if isinstance(dst, StyleLabel) else list(dst)
    if len(dsts) != len(examples):
        raise ValueError(f'{len(dsts)} destination styles given for {len(examples)} examples')
    out = []
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        attr = attributions[start:start + batch_size] if attributions is not None else attributor(batch)
        scores, lengths = pad_scores(attr)
        masks = attention_surplus_mask(scores, lambda_eps, lengths)
        masked = [apply_mask(ex, m[:n]) for ex, m, n in zip(batch, masks, lengths)]
        codes = [ControlCodes(ex.label, d) for ex, d in zip(batch, dsts[start:start + batch_size])]
        for m, c, probs in zip(masked, codes, smlm_forward_batch(model, masked, codes)):
            out.append(TransferResult(m.original, m, c.dst, _decode_positions(model, probs, m, copy_through)))
    return out


def transfer(model: SmlmModel, example: LabeledExample, attributor, lambda_eps, dst: StyleLabel, copy_through=True) -> tuple:
    '''Masks the style tokens of example and fills them for the destination style.

    :return: The output tokens; of the same length as the input.'''
    return transfer_batch(model, [example], attributor, lambda_eps, dst, copy_through)[0].output


def save_smlm(model: SmlmModel, out_dir, head: Optional[StyleClassifierHead] = None):
    '''Writes model.pt, head.pt (if given), config.json, vocab.json and train_log.jsonl to out_dir.

    :return: out_dir'''
    os.makedirs(out_dir, exist_ok=True)
    atomic_torch_save(model.state_dict(), os.path.join(out_dir, 'model.pt'))
    if head is not None:
        atomic_torch_save(head.state_dict(), os.path.join(out_dir, 'head.pt'))
    elif os.path.exists(os.path.join(out_dir, 'head.pt')):
        os.remove(os.path.join(out_dir, 'head.pt'))
    model.vocab.save(os.path.join(out_dir, 'vocab.json'))
    write_json({'format_version': CHECKPOINT_FORMAT, 'stylemlm_version': __version__, 'config': asdict(model.config),
                'n_parameters': model.n_parameters, 'vocab_size': len(model.vocab)}, os.path.join(out_dir, 'config.json'))
    with atomic_write(os.path.join(out_dir, 'train_log.jsonl')) as fh:
        for rec in model.history:
            fh.write(json.dumps(rec, sort_keys=True) + '\n')
    logger.info('saved style masked language model to %s', out_dir)
    return out_dir


def load_smlm(in_dir):
    '''Loads a checkpoint directory written by save_smlm.

    :return: Tuple (model, head), head is None if the model was not fine-tuned.'''
    meta = read_json(os.path.join(in_dir, 'config.json'))
    if meta.get('format_version') != CHECKPOINT_FORMAT:
        raise IncompatibleModelError(f'unsupported checkpoint format {meta.get("format_version")} in {in_dir}')
    if meta.get('stylemlm_version') != __version__:
        logger.warning('This is stylemlm version %s, but the model in %s has been saved with version %s, which may be incompatible',
                       __version__, in_dir, meta.get('stylemlm_version'))
    vocab = Vocabulary.load(os.path.join(in_dir, 'vocab.json'))
    if len(vocab) != meta['vocab_size']:
        raise IncompatibleModelError(f'vocabulary of {len(vocab)} tokens does not match the model ({meta["vocab_size"]})')
    model = SmlmModel(SmlmConfig.from_dict(meta['config']), vocab)
    model.load_state_dict(torch.load(os.path.join(in_dir, 'model.pt'), map_location='cpu'))
    log_fn = os.path.join(in_dir, 'train_log.jsonl')
    if os.path.exists(log_fn):
        with open(log_fn, encoding='utf8') as fh:
            model.history = [json.loads(line) for line in fh if line.strip()]
    head = None
    if os.path.exists(os.path.join(in_dir, 'head.pt')):
        head = build_head(model)
        head.load_state_dict(torch.load(os.path.join(in_dir, 'head.pt'), map_location='cpu'))
        head.eval()
    return model.eval(), head
