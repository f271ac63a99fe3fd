"""The three-phase continual-learning algorithm.

For each incoming task (after the first):

- Phase One, improvise: train a task head over the frozen prior adapters.
  With a single prior adapter only the head trains; with two or more, a
  fusion attention layer over the prior adapters trains jointly with the head.
- Phase Two, initialize: distill the improvise model into one fresh adapter
  by matching final encoder/decoder hidden states; for the second task the
  prior adapter is copied outright, with zero optimizer steps. The fusion is
  discarded here and never persisted.
- Phase Three, train: ordinary supervised training of the initialized
  adapter and head on the full task data.

The first task trains a fresh adapter directly. All data budgets follow the
variant (FF / FL / LL); subsampling uses a permutation prefix, so smaller
budgets are strict subsets of larger ones under a shared seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .adapters import AdapterParams, FusionParams, count_params, init_adapter, init_fusion
from .backbone import BackboneParams, TaskHead
from .checkpoint import blocks_digest, named_blocks
from .rng import Rng
from .tasks import Dataset, Example, QATask, RevocableDataset
from .training import (
    Hyper,
    PhaseResult,
    distill_loss_full,
    evaluate,
    train_distill,
    train_supervised,
)


@dataclass(frozen=True)
class I2IVariant:
    name: str
    improvise_fraction: float
    initialize_fraction: float

    def __post_init__(self):
        for f in (self.improvise_fraction, self.initialize_fraction):
            if not 0.0 < f <= 1.0:
                raise ValueError("variant fractions must be in (0, 1]")


VARIANTS = {
    "FF": I2IVariant("FF", 1.0, 1.0),
    "FL": I2IVariant("FL", 1.0, 0.05),
    "LL": I2IVariant("LL", 0.05, 0.05),
}


def subsample(examples: Sequence[Example], fraction: float,
              rng: Union[Rng, int]) -> list[Example]:
    """Uniform sample without replacement of ceil(fraction * n) examples.

    Deterministic per seed and order-stable (selected examples keep their
    dataset order). Prefix selection from one shared permutation makes
    smaller fractions subsets of larger ones for the same seed.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    examples = list(examples)
    if fraction == 1.0:
        return examples
    if isinstance(rng, int):
        rng = Rng(rng).split("subsample")
    m = math.ceil(fraction * len(examples))
    perm = rng.permutation(len(examples))
    idx = np.sort(perm[:m])
    return [examples[i] for i in idx]


@dataclass
class PhaseRecord:
    name: str
    score: float                  # full-validation score after the phase
    param_digest: str
    steps: int
    losses: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)


@dataclass
class PhaseTrace:
    task_id: str
    phases: list[PhaseRecord] = field(default_factory=list)


@dataclass
class TaskResult:
    """Everything a finished task leaves behind in the model store."""

    task_id: str
    algo: str
    final_score: float
    head: TaskHead
    adapter: Optional[AdapterParams] = None
    fusion: Optional[FusionParams] = None          # retained by adapterfusion only
    fusion_over: Optional[list[str]] = None        # task ids the fusion reads
    trace: Optional[PhaseTrace] = None
    improvise_score: Optional[float] = None        # S_F
    initialize_score: Optional[float] = None       # S_Phi
    distill_initial: Optional[float] = None
    distill_final: Optional[float] = None
    repr_vec: Optional[np.ndarray] = None          # pooled task representation
    source_task: Optional[str] = None              # closest-task-init choice
    similarities: Optional[list] = None
    fusion_param_count: Optional[int] = None       # size of a discarded fusion

    def store_blocks(self) -> dict[str, np.ndarray]:
        blocks = named_blocks(self.head, f"task/{self.task_id}/head/")
        if self.adapter is not None:
            blocks.update(named_blocks(self.adapter, f"task/{self.task_id}/adapter/"))
        if self.fusion is not None:
            blocks.update(named_blocks(self.fusion, f"task/{self.task_id}/fusion/"))
        if self.repr_vec is not None:
            blocks[f"task/{self.task_id}/repr"] = self.repr_vec
        return blocks

    def freeze_store(self) -> None:
        containers = [self.head]
        if self.adapter is not None:
            containers.append(self.adapter)
        if self.fusion is not None:
            containers.append(self.fusion)
        for cont in containers:
            for t in cont.tensors():
                t.requires_grad = False
                t.grad = None
                t.data.setflags(write=False)


def _digest(*objs) -> str:
    blocks: dict[str, np.ndarray] = {}
    for i, obj in enumerate(objs):
        if obj is not None:
            blocks.update(named_blocks(obj, f"{i}/"))
    return blocks_digest(blocks)


def improvise(k: int, train_examples: Sequence[Example], val: Dataset,
              prev_adapters: Sequence[AdapterParams], params: BackboneParams,
              head0: TaskHead, variant: I2IVariant, hyper: Hyper, rng: Rng
              ) -> tuple[Optional[FusionParams], TaskHead, float, PhaseResult]:
    """Phase One. Returns (fusion or None, trained head, score, trace)."""
    if k < 2:
        raise ValueError("improvise applies from the second task on")
    if len(prev_adapters) != k - 1:
        raise ValueError("improvise needs exactly the k-1 prior adapters")
    sub = subsample(train_examples, variant.improvise_fraction,
                    rng.split("improvise-sample"))
    if not sub:
        raise ValueError("improvise subsample is empty")
    head = head0.copy(requires_grad=True)
    loop_rng = rng.split("improvise-loop")
    if k == 2:
        res = train_supervised(params, head, head.tensors(), sub, val.examples,
                               hyper.epochs_improvise, hyper, loop_rng,
                               adapter=prev_adapters[0])
        score = evaluate(params, head, val.examples, adapter=prev_adapters[0],
                         batch_size=hyper.batch_size)
        return None, head, score, res
    cfg = params.config
    fusion = init_fusion(cfg.d_model, cfg.n_insertion_points, k - 1,
                         rng.split("fusion-init"))
    res = train_supervised(params, head, fusion.tensors() + head.tensors(),
                           sub, val.examples, hyper.epochs_improvise, hyper,
                           loop_rng, fusion=fusion, fusion_adapters=prev_adapters)
    score = evaluate(params, head, val.examples, fusion=fusion,
                     fusion_adapters=prev_adapters, batch_size=hyper.batch_size)
    return fusion, head, score, res


def initialize(k: int, teacher_fusion: Optional[FusionParams],
               teacher_head: TaskHead,
               prev_adapters: Sequence[AdapterParams],
               train_examples: Sequence[Example], val: Dataset,
               params: BackboneParams, variant: I2IVariant, hyper: Hyper,
               rng: Rng) -> tuple[AdapterParams, TaskHead, float, PhaseResult,
                                  Optional[float], Optional[float]]:
    """Phase Two. Returns (adapter, head, score, trace, L_D initial, final).

    k == 2 copies the single prior adapter bitwise (zero optimizer steps);
    k >= 3 distills the fusion teacher into a fresh adapter. The teacher is
    never modified; the caller discards the fusion afterwards.
    """
    if k < 2:
        raise ValueError("initialize applies from the second task on")
    if k == 2:
        if teacher_fusion is not None:
            raise ValueError("the second task has no fusion teacher")
        adapter = prev_adapters[0].copy(requires_grad=True)
        score = evaluate(params, teacher_head, val.examples, adapter=adapter,
                         batch_size=hyper.batch_size)
        return adapter, teacher_head, score, PhaseResult(), None, None
    if teacher_fusion is None:
        raise ValueError("initialize for k >= 3 needs the improvise fusion")
    sub = subsample(train_examples, variant.initialize_fraction,
                    rng.split("initialize-sample"))
    cfg = params.config
    student_adapter = init_adapter(cfg.d_model, cfg.n_insertion_points,
                                   hyper.bottleneck, rng.split("student-init"))
    student_head = teacher_head.copy(requires_grad=True)
    teacher_kwargs = dict(fusion=teacher_fusion, fusion_adapters=list(prev_adapters))
    initial = distill_loss_full(params, teacher_head, teacher_kwargs,
                                student_head, student_adapter, sub,
                                batch_size=hyper.batch_size)
    res = train_distill(params, teacher_head, teacher_kwargs, student_head,
                        student_adapter, sub, hyper.epochs_initialize, hyper,
                        rng.split("distill-loop"))
    final = distill_loss_full(params, teacher_head, teacher_kwargs,
                              student_head, student_adapter, sub,
                              batch_size=hyper.batch_size)
    score = evaluate(params, student_head, val.examples, adapter=student_adapter,
                     batch_size=hyper.batch_size)
    return student_adapter, student_head, score, res, initial, final


def train_adapter(k: int, adapter: AdapterParams, head: TaskHead,
                  train_examples: Sequence[Example], val: Dataset,
                  params: BackboneParams, hyper: Hyper, rng: Rng,
                  current_score: Optional[float] = None
                  ) -> tuple[AdapterParams, TaskHead, float, PhaseResult]:
    """Phase Three: full-data supervised training of (adapter, head)."""
    if hyper.epochs_train <= 0:
        score = (current_score if current_score is not None else
                 evaluate(params, head, val.examples, adapter=adapter,
                          batch_size=hyper.batch_size))
        return adapter, head, score, PhaseResult()
    res = train_supervised(params, head, adapter.tensors() + head.tensors(),
                           list(train_examples), val.examples,
                           hyper.epochs_train, hyper, rng.split("train-loop"),
                           adapter=adapter)
    score = evaluate(params, head, val.examples, adapter=adapter,
                     batch_size=hyper.batch_size)
    return adapter, head, score, res


def train_first_task(task_id: str, train_examples: Sequence[Example],
                     val: Dataset, params: BackboneParams, head0: TaskHead,
                     hyper: Hyper, rng: Rng, algo: str = "i2i") -> TaskResult:
    """The first task bypasses the engine: a fresh adapter trains directly."""
    cfg = params.config
    adapter = init_adapter(cfg.d_model, cfg.n_insertion_points,
                           hyper.bottleneck, rng.split("adapter-init"))
    head = head0.copy(requires_grad=True)
    res = train_supervised(params, head, adapter.tensors() + head.tensors(),
                           list(train_examples), val.examples,
                           hyper.epochs_train, hyper, rng.split("train-loop"),
                           adapter=adapter)
    score = evaluate(params, head, val.examples, adapter=adapter,
                     batch_size=hyper.batch_size)
    trace = PhaseTrace(task_id, [PhaseRecord(
        "train", score, _digest(adapter, head), res.steps,
        res.losses, res.val_curve)])
    return TaskResult(task_id=task_id, algo=algo, final_score=score,
                      head=head, adapter=adapter, trace=trace)


def i2i_task(k: int, task: QATask, train_examples: Sequence[Example],
             val: Dataset, prior: Sequence[TaskResult],
             params: BackboneParams, head0: TaskHead, variant: I2IVariant,
             hyper: Hyper, rng: Rng) -> TaskResult:
    """Run one task through the engine (k is the 1-based task position)."""
    if k == 1:
        return train_first_task(task.task_id, train_examples, val, params,
                                head0, hyper, rng)
    prev_adapters = [r.adapter for r in prior]
    trace = PhaseTrace(task.task_id)

    fusion, head, s_f, res1 = improvise(k, train_examples, val, prev_adapters,
                                        params, head0, variant, hyper, rng)
    fusion_count = count_params(fusion) if fusion is not None else None
    trace.phases.append(PhaseRecord("improvise", s_f, _digest(fusion, head),
                                    res1.steps, res1.losses, res1.val_curve))

    adapter, head, s_phi, res2, ld0, ld1 = initialize(
        k, fusion, head, prev_adapters, train_examples, val, params, variant,
        hyper, rng)
    trace.phases.append(PhaseRecord("initialize", s_phi, _digest(adapter, head),
                                    res2.steps, res2.losses, res2.val_curve))
    del fusion  # discarded: never persisted, never counted at inference

    adapter, head, s3, res3 = train_adapter(k, adapter, head, train_examples,
                                            val, params, hyper, rng,
                                            current_score=s_phi)
    trace.phases.append(PhaseRecord("train", s3, _digest(adapter, head),
                                    res3.steps, res3.losses, res3.val_curve))

    return TaskResult(task_id=task.task_id, algo="i2i", final_score=s3,
                      head=head, adapter=adapter, trace=trace,
                      improvise_score=s_f, initialize_score=s_phi,
                      distill_initial=ld0, distill_final=ld1,
                      fusion_param_count=fusion_count)


def run_i2i(tasks: Sequence[tuple[QATask, Union[Dataset, RevocableDataset], Dataset]],
            variant: I2IVariant, params: BackboneParams, head0: TaskHead,
            hyper: Hyper, seed: int) -> list[TaskResult]:
    """Run a whole schedule: [(task, train, val), ...] in order.

    Prior adapters are hard-frozen as each task completes; fusion parameters
    never survive Phase Two. For schedule-level auditing and records use the
    harness, which wraps this loop.
    """
    if len(tasks) < 2:
        raise ValueError("a continual-learning run needs at least two tasks")
    results: list[TaskResult] = []
    run_rng = Rng(seed)
    for i, (task, train, val) in enumerate(tasks, start=1):
        examples = train.examples if hasattr(train, "examples") else list(train)
        res = i2i_task(i, task, examples, val, results, params, head0, variant,
                       hyper, run_rng.split(f"task-{task.task_id}"))
        res.freeze_store()
        results.append(res)
    return results
