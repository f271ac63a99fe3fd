"""Shared training machinery: batching, evaluation, early stopping, and the
three loop flavors (supervised answer training, hidden-state distillation,
backbone pretraining).

Early stopping is identical everywhere: evaluate once per epoch, keep the
best parameter snapshot, stop after `patience` non-improving evaluations,
restore the best snapshot at the end. Supervised phases score exact match on
a fixed seeded validation subset; the distillation phase (which has no
answer-level objective) scores validation distillation loss the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .adapters import AdapterParams, FusionParams
from .backbone import (
    Batch,
    BackboneConfig,
    BackboneParams,
    ForwardOutput,
    IGNORE_INDEX,
    TaskHead,
    forward,
    generate,
    init_backbone,
    init_head,
    pack_batch,
)
from .optim import Adam
from .rng import Rng
from .tasks import Dataset, Example, majority_answer_fraction, score_exact_match
from .tensor import Tape, Tensor, backward, cross_entropy, reshape, tsum


@dataclass(frozen=True)
class Hyper:
    """Per-phase budgets; improvise/initialize/train share the defaults."""

    lr: float = 1e-3
    batch_size: int = 64
    bottleneck: int = 8
    epochs_improvise: int = 8
    epochs_initialize: int = 8
    epochs_train: int = 8
    patience: int = 3
    eval_subset: int = 250

    def with_epochs(self, n: int) -> "Hyper":
        return replace(self, epochs_improvise=n, epochs_initialize=n,
                       epochs_train=n)


@dataclass
class PhaseResult:
    losses: list[float] = field(default_factory=list)      # per-epoch means
    val_curve: list[float] = field(default_factory=list)   # per-epoch metric
    best_epoch: int = -1
    steps: int = 0


class _Modules:
    """Bundle of the optional task modules a forward pass needs."""

    def __init__(self, adapter: Optional[AdapterParams] = None,
                 fusion: Optional[FusionParams] = None,
                 fusion_adapters: Optional[Sequence[AdapterParams]] = None):
        self.adapter = adapter
        self.fusion = fusion
        self.fusion_adapters = fusion_adapters

    def forward(self, params: BackboneParams, head: TaskHead, batch: Batch) -> ForwardOutput:
        return forward(params, head, batch, adapter=self.adapter,
                       fusion=self.fusion, fusion_adapters=self.fusion_adapters)

    def generate(self, params, head, batch):
        return generate(params, head, batch, adapter=self.adapter,
                        fusion=self.fusion, fusion_adapters=self.fusion_adapters)


def answer_loss(out: ForwardOutput, batch: Batch) -> Tensor:
    b, t, v = out.logits.data.shape
    return cross_entropy(reshape(out.logits, (b * t, v)),
                         batch.tgt_out.reshape(-1), ignore_index=IGNORE_INDEX)


def evaluate(params: BackboneParams, head: TaskHead, examples: Sequence[Example],
             adapter: Optional[AdapterParams] = None,
             fusion: Optional[FusionParams] = None,
             fusion_adapters: Optional[Sequence[AdapterParams]] = None,
             batch_size: int = 64) -> float:
    """Greedy-decoding exact match (%) over `examples`, in dataset order."""
    examples = list(examples)
    mods = _Modules(adapter, fusion, fusion_adapters)
    preds: list[tuple[int, ...]] = []
    refs: list[tuple[int, ...]] = []
    for i in range(0, len(examples), batch_size):
        batch = pack_batch(examples[i:i + batch_size], params.config)
        preds.extend(mods.generate(params, head, batch))
        refs.extend(batch.references)
    return score_exact_match(preds, refs)


def _snapshot(tensors: Sequence[Tensor]) -> list[np.ndarray]:
    return [t.data.copy() for t in tensors]


def _restore(tensors: Sequence[Tensor], snap: list[np.ndarray]) -> None:
    for t, s in zip(tensors, snap):
        t.data[:] = s


def _subset(examples: Sequence[Example], n: int, rng: Rng) -> list[Example]:
    examples = list(examples)
    if n >= len(examples):
        return examples
    idx = np.sort(rng.choice(len(examples), size=n, replace=False))
    return [examples[i] for i in idx]


def _epoch_batches(examples: list[Example], batch_size: int, rng: Rng):
    order = rng.permutation(len(examples))
    for i in range(0, len(examples), batch_size):
        yield [examples[j] for j in order[i:i + batch_size]]


def train_supervised(params: BackboneParams, head: TaskHead,
                     trainable: Sequence[Tensor],
                     train_examples: Sequence[Example],
                     val_examples: Sequence[Example],
                     epochs: int, hyper: Hyper, rng: Rng,
                     adapter: Optional[AdapterParams] = None,
                     fusion: Optional[FusionParams] = None,
                     fusion_adapters: Optional[Sequence[AdapterParams]] = None
                     ) -> PhaseResult:
    """Cross-entropy training of `trainable` with early stopping on exact
    match over a fixed seeded validation subset. Higher is better."""
    res = PhaseResult()
    if epochs <= 0:
        return res
    mods = _Modules(adapter, fusion, fusion_adapters)
    train_examples = list(train_examples)
    es_val = _subset(val_examples, hyper.eval_subset, rng.split("es-subset"))
    opt = Adam(list(trainable), lr=hyper.lr)
    best, best_snap, stale = -np.inf, None, 0
    for epoch in range(epochs):
        losses = []
        for ex in _epoch_batches(train_examples, hyper.batch_size,
                                 rng.split(f"epoch-{epoch}")):
            batch = pack_batch(ex, params.config)
            opt.zero_grad()
            with Tape():
                loss = answer_loss(mods.forward(params, head, batch), batch)
                backward(loss)
            opt.step()
            losses.append(loss.item())
            res.steps += 1
        res.losses.append(float(np.mean(losses)))
        score = evaluate(params, head, es_val, adapter, fusion, fusion_adapters,
                         batch_size=hyper.batch_size)
        res.val_curve.append(score)
        if score > best:
            best, best_snap, stale = score, _snapshot(trainable), 0
            res.best_epoch = epoch
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    if best_snap is not None:
        _restore(trainable, best_snap)
    return res


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------

def _teacher_cache(params: BackboneParams, head: TaskHead, mods: _Modules,
                   examples: list[Example], batch_size: int):
    """Per-example valid-position hidden states of the frozen teacher."""
    enc_rows, dec_rows = [], []
    for i in range(0, len(examples), batch_size):
        batch = pack_batch(examples[i:i + batch_size], params.config)
        out = mods.forward(params, head, batch)
        for j in range(batch.size):
            enc_rows.append(out.h_enc.data[j][batch.src_mask[j] == 1.0])
            dec_rows.append(out.h_dec.data[j][batch.tgt_mask[j] == 1.0])
    return enc_rows, dec_rows


def distill_loss_on_batch(params: BackboneParams, student_head: TaskHead,
                          student_adapter: AdapterParams, batch: Batch,
                          t_enc: np.ndarray, t_dec: np.ndarray) -> Tensor:
    """Masked MSE between student and cached teacher hidden states."""
    out = forward(params, student_head, batch, adapter=student_adapter)
    d = params.config.d_model
    e_mask = Tensor(batch.src_mask[:, :, None])
    d_mask = Tensor(batch.tgt_mask[:, :, None])
    n_e = batch.src_mask.sum() * d
    n_d = batch.tgt_mask.sum() * d
    diff_e = (out.h_enc - Tensor(t_enc)) * e_mask
    diff_d = (out.h_dec - Tensor(t_dec)) * d_mask
    return tsum(diff_e * diff_e) * (1.0 / n_e) + tsum(diff_d * diff_d) * (1.0 / n_d)


def _fill_teacher(batch: Batch, enc_rows, dec_rows, idx, d_model: int):
    b, s = batch.src_mask.shape
    t = batch.tgt_mask.shape[1]
    t_enc = np.zeros((b, s, d_model))
    t_dec = np.zeros((b, t, d_model))
    for j, i in enumerate(idx):
        t_enc[j][batch.src_mask[j] == 1.0] = enc_rows[i]
        t_dec[j][batch.tgt_mask[j] == 1.0] = dec_rows[i]
    return t_enc, t_dec


def train_distill(params: BackboneParams, teacher_head: TaskHead,
                  teacher_mods_kwargs: dict,
                  student_head: TaskHead, student_adapter: AdapterParams,
                  examples: Sequence[Example], epochs: int, hyper: Hyper,
                  rng: Rng) -> PhaseResult:
    """Train (student_adapter, student_head) to reproduce the teacher's final
    encoder/decoder hidden states on teacher-forced passes.

    Answer tokens are used only to drive the decoder of both models; no
    label loss is applied. Early stopping tracks held-out distillation loss
    (lower is better) on a seeded subset of the training inputs.
    """
    res = PhaseResult()
    if epochs <= 0:
        return res
    examples = list(examples)
    teacher_mods = _Modules(**teacher_mods_kwargs)
    enc_rows, dec_rows = _teacher_cache(params, teacher_head, teacher_mods,
                                        examples, hyper.batch_size)
    trainable = student_adapter.tensors() + student_head.tensors()
    opt = Adam(trainable, lr=hyper.lr)
    d = params.config.d_model

    es_idx = (np.arange(len(examples)) if len(examples) <= hyper.eval_subset
              else np.sort(rng.split("es-subset").choice(
                  len(examples), size=hyper.eval_subset, replace=False)))

    def held_out_loss() -> float:
        total, n = 0.0, 0
        for i in range(0, len(es_idx), hyper.batch_size):
            idx = es_idx[i:i + hyper.batch_size]
            batch = pack_batch([examples[j] for j in idx], params.config)
            t_enc, t_dec = _fill_teacher(batch, enc_rows, dec_rows, idx, d)
            loss = distill_loss_on_batch(params, student_head, student_adapter,
                                         batch, t_enc, t_dec)
            total += loss.item() * len(idx)
            n += len(idx)
        return total / n

    best, best_snap, stale = np.inf, None, 0
    for epoch in range(epochs):
        losses = []
        order = rng.split(f"epoch-{epoch}").permutation(len(examples))
        for i in range(0, len(examples), hyper.batch_size):
            idx = order[i:i + hyper.batch_size]
            batch = pack_batch([examples[j] for j in idx], params.config)
            t_enc, t_dec = _fill_teacher(batch, enc_rows, dec_rows, idx, d)
            opt.zero_grad()
            with Tape():
                loss = distill_loss_on_batch(params, student_head,
                                             student_adapter, batch, t_enc, t_dec)
                backward(loss)
            opt.step()
            losses.append(loss.item())
            res.steps += 1
        res.losses.append(float(np.mean(losses)))
        score = held_out_loss()
        res.val_curve.append(score)
        if score < best:
            best, best_snap, stale = score, _snapshot(trainable), 0
            res.best_epoch = epoch
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    if best_snap is not None:
        _restore(trainable, best_snap)
    return res


def distill_loss_full(params: BackboneParams, teacher_head: TaskHead,
                      teacher_mods_kwargs: dict, student_head: TaskHead,
                      student_adapter: AdapterParams,
                      examples: Sequence[Example], batch_size: int = 64) -> float:
    """Distillation loss of a fixed student over `examples` (no training)."""
    examples = list(examples)
    teacher_mods = _Modules(**teacher_mods_kwargs)
    enc_rows, dec_rows = _teacher_cache(params, teacher_head, teacher_mods,
                                        examples, batch_size)
    total, n = 0.0, 0
    d = params.config.d_model
    for i in range(0, len(examples), batch_size):
        idx = np.arange(i, min(i + batch_size, len(examples)))
        batch = pack_batch([examples[j] for j in idx], params.config)
        t_enc, t_dec = _fill_teacher(batch, enc_rows, dec_rows, idx, d)
        loss = distill_loss_on_batch(params, student_head, student_adapter,
                                     batch, t_enc, t_dec)
        total += loss.item() * len(idx)
        n += len(idx)
    return total / n


# ---------------------------------------------------------------------------
# backbone pretraining
# ---------------------------------------------------------------------------

def pretrain_backbone(config: BackboneConfig, corpus: tuple[Dataset, Dataset],
                      seed: int, epochs: int = 10, hyper: Optional[Hyper] = None
                      ) -> tuple[BackboneParams, TaskHead, PhaseResult]:
    """Train the whole backbone plus a shared head on the mixture corpus,
    then freeze both. `epochs=0` returns the random initialization, frozen.

    Returns (frozen backbone, frozen shared head, trace).
    """
    hyper = hyper or Hyper()
    rng = Rng(seed).split("pretrain")
    params = init_backbone(config, rng.split("backbone"))
    head = init_head(config, rng.split("head"))
    train_ds, val_ds = corpus
    res = PhaseResult()
    if epochs > 0:
        trainable = params.tensors() + head.tensors()
        res = train_supervised(params, head, trainable,
                               train_ds.examples, val_ds.examples,
                               epochs, hyper, rng.split("loop"))
    params.freeze()
    for t in head.tensors():
        t.requires_grad = False
        t.data.setflags(write=False)
    return params, head, res


def pretrain_report(params: BackboneParams, head: TaskHead,
                    corpus: tuple[Dataset, Dataset]) -> dict:
    """Mixture exact match vs the majority-answer floor."""
    _, val_ds = corpus
    return {
        "mixture_exact_match": evaluate(params, head, val_ds.examples),
        "majority_fraction": majority_answer_fraction(val_ds),
    }
