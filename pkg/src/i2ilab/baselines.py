"""Reference continual-learning algorithms the engine is compared against.

- vanilla: an independent fresh adapter per task (no cross-task state).
- adapterfusion: two phases per task; the fusion layer over all adapters so
  far is retained for inference, which is exactly the parametric cost the
  distillation engine avoids.
- closest_task_init: copy the adapter of the most cosine-similar prior task
  (pooled-representation similarity), then train.
- knowledge_free: only the task head trains; the control for measuring what
  prior adapters contribute.
- full_finetune: single-task reference that trains an unfrozen copy of the
  whole backbone; never part of a schedule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .adapters import AdapterParams, init_fusion
from .backbone import BackboneParams, TaskHead, encode_pooled
from .i2i import PhaseRecord, PhaseTrace, TaskResult, _digest, train_first_task
from .rng import Rng
from .tasks import Dataset, Example, QATask
from .training import Hyper, evaluate, train_supervised


def train_vanilla(task_id: str, train_examples: Sequence[Example], val: Dataset,
                  params: BackboneParams, head0: TaskHead, hyper: Hyper,
                  rng: Rng) -> TaskResult:
    """Fresh adapter + head trained on the full task data, nothing shared."""
    return train_first_task(task_id, train_examples, val, params, head0,
                            hyper, rng, algo="vanilla")


def train_adapterfusion(k: int, task_id: str, train_examples: Sequence[Example],
                        val: Dataset, prior: Sequence[TaskResult],
                        params: BackboneParams, head0: TaskHead, hyper: Hyper,
                        rng: Rng) -> TaskResult:
    """Two-phase baseline: extract a fresh adapter, then compose it with all
    prior adapters through a fusion layer that is kept for inference."""
    if k == 1:
        return train_first_task(task_id, train_examples, val, params, head0,
                                hyper, rng, algo="adapterfusion")
    if len(prior) != k - 1:
        raise ValueError("adapterfusion needs the k-1 prior task results")
    extract = train_first_task(task_id, train_examples, val, params, head0,
                               hyper, rng, algo="adapterfusion")
    adapter, head = extract.adapter, extract.head
    trace = PhaseTrace(task_id, [PhaseRecord(
        "extract", extract.final_score, _digest(adapter, head),
        extract.trace.phases[0].steps, extract.trace.phases[0].losses,
        extract.trace.phases[0].val_curve)])

    # knowledge composition over frozen adapters, own adapter included
    for t in adapter.tensors():
        t.requires_grad = False
    all_adapters = [r.adapter for r in prior] + [adapter]
    cfg = params.config
    fusion = init_fusion(cfg.d_model, cfg.n_insertion_points, k,
                         rng.split("fusion-init"))
    res = train_supervised(params, head, fusion.tensors() + head.tensors(),
                           list(train_examples), val.examples,
                           hyper.epochs_improvise, hyper, rng.split("compose-loop"),
                           fusion=fusion, fusion_adapters=all_adapters)
    score = evaluate(params, head, val.examples, fusion=fusion,
                     fusion_adapters=all_adapters, batch_size=hyper.batch_size)
    trace.phases.append(PhaseRecord("compose", score, _digest(fusion, head),
                                    res.steps, res.losses, res.val_curve))
    return TaskResult(task_id=task_id, algo="adapterfusion", final_score=score,
                      head=head, adapter=adapter, fusion=fusion,
                      fusion_over=[r.task_id for r in prior] + [task_id],
                      trace=trace)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """cos(a, b); exactly 1.0 for identical vectors, 0.0 for orthogonal."""
    if np.array_equal(a, b):
        return 1.0
    dot = float(np.dot(a, b))
    if dot == 0.0:
        return 0.0
    return dot / float(np.sqrt(np.dot(a, a) * np.dot(b, b)))


def select_closest(similarities: Sequence[tuple[str, float]]) -> str:
    """Argmax task id; ties break toward the earliest entry."""
    if not similarities:
        raise ValueError("no prior tasks to select from")
    best_id, best = similarities[0]
    for tid, s in similarities[1:]:
        if s > best:
            best_id, best = tid, s
    return best_id


def task_representation(params: BackboneParams, head: TaskHead,
                        train_examples: Sequence[Example]) -> np.ndarray:
    """Pooled dataset representation used for task similarity."""
    return encode_pooled(params, head, Dataset(list(train_examples)))


def closest_task_init(k: int, task_id: str, train_examples: Sequence[Example],
                      val: Dataset, prior: Sequence[TaskResult],
                      params: BackboneParams, head0: TaskHead, hyper: Hyper,
                      rng: Rng) -> TaskResult:
    """Initialize from the most similar prior task's adapter, then train.

    Prior representations were persisted when those tasks trained (their
    training data is gone by now); the new task's query representation uses
    the shared pretrained head, the only head that exists before training.
    """
    if k == 1:
        res = train_first_task(task_id, train_examples, val, params, head0,
                               hyper, rng, algo="closest_task_init")
        res.repr_vec = task_representation(params, res.head, train_examples)
        return res
    if not prior:
        raise ValueError("closest_task_init needs at least one prior task")
    h_k = task_representation(params, head0, train_examples)
    sims = [(r.task_id, cosine_similarity(h_k, r.repr_vec)) for r in prior]
    chosen = select_closest(sims)
    source = next(r for r in prior if r.task_id == chosen)
    adapter = source.adapter.copy(requires_grad=True)
    head = source.head.copy(requires_grad=True)
    res = train_supervised(params, head, adapter.tensors() + head.tensors(),
                           list(train_examples), val.examples,
                           hyper.epochs_train, hyper, rng.split("train-loop"),
                           adapter=adapter)
    score = evaluate(params, head, val.examples, adapter=adapter,
                     batch_size=hyper.batch_size)
    trace = PhaseTrace(task_id, [PhaseRecord(
        "train", score, _digest(adapter, head), res.steps, res.losses,
        res.val_curve)])
    out = TaskResult(task_id=task_id, algo="closest_task_init",
                     final_score=score, head=head, adapter=adapter, trace=trace)
    out.repr_vec = task_representation(params, head, train_examples)
    out.source_task = chosen
    out.similarities = sims
    return out


def knowledge_free(task_id: str, train_examples: Sequence[Example], val: Dataset,
                   params: BackboneParams, head0: TaskHead, hyper: Hyper,
                   rng: Rng) -> TaskResult:
    """Head-only training; no adapters anywhere."""
    head = head0.copy(requires_grad=True)
    res = train_supervised(params, head, head.tensors(), list(train_examples),
                           val.examples, hyper.epochs_train, hyper,
                           rng.split("train-loop"))
    score = evaluate(params, head, val.examples, batch_size=hyper.batch_size)
    trace = PhaseTrace(task_id, [PhaseRecord(
        "train", score, _digest(head), res.steps, res.losses, res.val_curve)])
    return TaskResult(task_id=task_id, algo="knowledge_free",
                      final_score=score, head=head, trace=trace)


def full_finetune(train_examples: Sequence[Example], val: Dataset,
                  params: BackboneParams, head0: TaskHead, hyper: Hyper,
                  rng: Rng) -> float:
    """Single-task reference: train an unfrozen copy of everything.

    The frozen original is never touched (it is copied up front).
    """
    clone = params.copy(requires_grad=True)
    head = head0.copy(requires_grad=True)
    train_supervised(clone, head, clone.tensors() + head.tensors(),
                     list(train_examples), val.examples, hyper.epochs_train,
                     hyper, rng.split("train-loop"))
    return evaluate(clone, head, val.examples, batch_size=hyper.batch_size)


@dataclass
class TaskSimilarityMatrix:
    """Pairwise cosine similarities; the diagonal is undefined."""

    task_ids: list[str]
    values: np.ndarray   # (n, n), nan on the diagonal

    @classmethod
    def from_vectors(cls, task_ids: Sequence[str],
                     vectors: Sequence[np.ndarray]) -> "TaskSimilarityMatrix":
        n = len(task_ids)
        m = np.full((n, n), np.nan)
        for i in range(n):
            for j in range(n):
                if i != j:
                    m[i, j] = cosine_similarity(vectors[i], vectors[j])
        return cls(list(task_ids), m)

    def to_csv(self) -> str:
        lines = ["task," + ",".join(self.task_ids)]
        for i, tid in enumerate(self.task_ids):
            cells = ["-" if i == j else f"{self.values[i, j]:.4f}"
                     for j in range(len(self.task_ids))]
            lines.append(tid + "," + ",".join(cells))
        return "\n".join(lines) + "\n"
