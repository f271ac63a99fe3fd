"""Schedule execution, the forgetting audit, parameter accounting, and the
run record.

A schedule runs tasks in order under one algorithm. After every task the
harness re-evaluates all completed tasks with their stored parameters and
demands bit-equal scores (the zero-forgetting audit), then revokes the
finished task's training-data handle, so no later step can read it.

The run record is a schema-versioned JSON document that is byte-identical
across reruns with the same config and seed. Wall-clock timings are kept out
of it (they go to a sidecar) for exactly that reason.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adapters import count_params
from .backbone import BackboneParams, TaskHead
from .baselines import (
    closest_task_init,
    knowledge_free,
    train_adapterfusion,
    train_vanilla,
)
from .checkpoint import blocks_digest, config_digest, named_blocks
from .i2i import TaskResult, VARIANTS, I2IVariant, i2i_task
from .metrics import (
    distillation_decay,
    knowledge_transfer,
    overall_transfer,
    phase3_gain,
)
from .rng import Rng
from .tasks import Dataset, QATask, RevocableDataset
from .training import Hyper, evaluate

SCHEMA_VERSION = 1

ALGORITHMS = ("vanilla", "adapterfusion", "closest_task_init", "i2i",
              "knowledge_free")


class ForgettingAuditError(RuntimeError):
    """A stored task failed to reproduce its recorded score bit-exactly."""


@dataclass
class CLSchedule:
    tasks: list[QATask]                  # in execution order
    algorithm: str
    seed: int
    variant: Optional[str] = None        # required iff algorithm == "i2i"
    hyper: Hyper = field(default_factory=Hyper)
    out_dir: Optional[str] = None

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("schedule tasks must be unique")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if (self.variant is not None) != (self.algorithm == "i2i"):
            raise ValueError("variant must be given exactly when algorithm is i2i")
        if self.variant is not None and self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class TaskData:
    task: QATask
    train: RevocableDataset
    val: Dataset

    @classmethod
    def wrap(cls, task: QATask, train: Dataset, val: Dataset) -> "TaskData":
        return cls(task, RevocableDataset(train, f"{task.task_id}/train"), val)


def _eval_stored(result: TaskResult, store: Sequence[TaskResult],
                 params: BackboneParams, val: Dataset, batch_size: int) -> float:
    """Evaluate a finished task exactly as it will be evaluated forever:
    with its stored head plus adapter (and fusion, when retained)."""
    if result.fusion is not None:
        by_id = {r.task_id: r for r in store}
        adapters = [by_id[t].adapter for t in result.fusion_over]
        return evaluate(params, result.head, val.examples, fusion=result.fusion,
                        fusion_adapters=adapters, batch_size=batch_size)
    return evaluate(params, result.head, val.examples, adapter=result.adapter,
                    batch_size=batch_size)


def run_task(algorithm: str, k: int, data: TaskData,
             prior: Sequence[TaskResult], params: BackboneParams,
             head0: TaskHead, hyper: Hyper, variant: Optional[I2IVariant],
             rng: Rng) -> TaskResult:
    examples = data.train.examples
    if algorithm == "vanilla":
        return train_vanilla(data.task.task_id, examples, data.val, params,
                             head0, hyper, rng)
    if algorithm == "knowledge_free":
        return knowledge_free(data.task.task_id, examples, data.val, params,
                              head0, hyper, rng)
    if algorithm == "adapterfusion":
        return train_adapterfusion(k, data.task.task_id, examples, data.val,
                                   prior, params, head0, hyper, rng)
    if algorithm == "closest_task_init":
        return closest_task_init(k, data.task.task_id, examples, data.val,
                                 prior, params, head0, hyper, rng)
    if algorithm == "i2i":
        return i2i_task(k, data.task, examples, data.val, prior, params,
                        head0, variant, hyper, rng)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def param_counts(algorithm: str, k: int, results: Sequence[TaskResult],
                 backbone_count: int) -> dict[str, int]:
    """Exact parameter accounting at task step k (1-based), by enumerating
    the stored objects.

    - training_forward: parameters active in a training-time forward pass,
      including the live fusion during the phases that train one.
    - inference: parameters active when evaluating task k task-aware.
    - total: everything persisted through step k, backbone included.
    """
    r = results[k - 1]
    head_n = count_params(r.head)
    adapter_n = count_params(r.adapter) if r.adapter is not None else 0
    prior_adapters = sum(count_params(p.adapter) for p in results[:k - 1]
                         if p.adapter is not None)
    if r.fusion is not None:
        fusion_n = count_params(r.fusion)
    else:
        fusion_n = r.fusion_param_count or 0

    if algorithm in ("vanilla", "closest_task_init", "knowledge_free"):
        training = backbone_count + adapter_n + head_n
        inference = backbone_count + adapter_n + head_n
    elif algorithm == "adapterfusion":
        if k == 1:
            training = inference = backbone_count + adapter_n + head_n
        else:
            active = backbone_count + prior_adapters + adapter_n + fusion_n + head_n
            training = inference = active
    elif algorithm == "i2i":
        inference = backbone_count + adapter_n + head_n
        if k <= 2:
            training = backbone_count + adapter_n + head_n
        else:
            # Phase One forward: all prior adapters plus the live fusion
            training = backbone_count + prior_adapters + fusion_n + head_n
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")

    total = backbone_count
    for p in results[:k]:
        total += count_params(p.head)
        if p.adapter is not None:
            total += count_params(p.adapter)
        if p.fusion is not None:
            total += count_params(p.fusion)
    return {"training_forward": training, "inference": inference, "total": total}


@dataclass
class RunOutput:
    record: dict
    results: list[TaskResult]
    store_blocks: dict[str, np.ndarray]
    timings: dict[str, float]


def run_schedule(schedule: CLSchedule, params: BackboneParams, head0: TaskHead,
                 data: Sequence[TaskData]) -> RunOutput:
    """Execute a schedule with auditing, revocation, and full accounting."""
    if len(data) != len(schedule.tasks):
        raise ValueError("schedule and data disagree")
    for td, task in zip(data, schedule.tasks):
        if td.task.task_id != task.task_id:
            raise ValueError("schedule and data are ordered differently")
    if not params.frozen:
        raise ValueError("run_schedule needs a frozen backbone")
    variant = VARIANTS[schedule.variant] if schedule.variant else None
    backbone_count = count_params_backbone(params)
    run_rng = Rng(schedule.seed)
    results: list[TaskResult] = []
    task_records: list[dict] = []
    timings: dict[str, float] = {}
    bs = schedule.hyper.batch_size

    for k, td in enumerate(data, start=1):
        t0 = time.perf_counter()
        res = run_task(schedule.algorithm, k, td, results, params, head0,
                       schedule.hyper, variant, run_rng.split(f"task-{td.task.task_id}"))
        res.freeze_store()
        results.append(res)
        timings[td.task.task_id] = time.perf_counter() - t0

        # zero-forgetting audit: every completed task must reproduce its
        # recorded score bit-exactly from the store
        for j, prev in enumerate(results):
            again = _eval_stored(prev, results, params, data[j].val, bs)
            if again != prev.final_score:
                raise ForgettingAuditError(
                    f"task {prev.task_id} scored {again!r} on re-evaluation, "
                    f"recorded {prev.final_score!r}")
        td.train.revoke()

        counts = param_counts(schedule.algorithm, k, results, backbone_count)
        phases = []
        if res.trace is not None:
            for ph in res.trace.phases:
                phases.append({"name": ph.name, "score": ph.score,
                               "steps": ph.steps, "param_digest": ph.param_digest,
                               "losses": ph.losses, "val_curve": ph.val_curve})
        task_records.append({
            "task_id": res.task_id,
            "position": k,
            "final_score": res.final_score,
            "phases": phases,
            "improvise_score": res.improvise_score,
            "initialize_score": res.initialize_score,
            "distill_initial": res.distill_initial,
            "distill_final": res.distill_final,
            "source_task": res.source_task,
            "param_counts": counts,
            "store_digest": blocks_digest(res.store_blocks()),
            "forgetting_audit": "pass",
        })

    store_blocks: dict[str, np.ndarray] = {}
    for res in results:
        store_blocks.update(res.store_blocks())
    store_blocks.update(named_blocks(params, "backbone/"))
    store_blocks.update(named_blocks(head0, "head0/"))

    record = {
        "schema_version": SCHEMA_VERSION,
        "algorithm": schedule.algorithm,
        "variant": schedule.variant,
        "seed": schedule.seed,
        "task_order": [t.task_id for t in schedule.tasks],
        "backbone_config_digest": config_digest(params.config),
        "tasks": task_records,
        "store_digest": blocks_digest(store_blocks),
    }
    return RunOutput(record, results, store_blocks, timings)


def count_params_backbone(params: BackboneParams) -> int:
    return count_params(params)


def record_digest(record: dict) -> str:
    return hashlib.sha256(record_to_json(record).encode("utf-8")).hexdigest()


def record_to_json(record: dict) -> str:
    return json.dumps(record, sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# metric tables and parameter reports
# ---------------------------------------------------------------------------

def scores_by_task(record: dict) -> dict[str, float]:
    return {t["task_id"]: t["final_score"] for t in record["tasks"]}


def transfer_table(vanilla_record: dict, candidate_records: Sequence[dict]
                   ) -> dict:
    """Per-task transfer for each candidate against the vanilla scores.

    Transfer is computed only on tasks at positions 2..K of the candidate's
    order; overall transfer is their mean.
    """
    base = scores_by_task(vanilla_record)
    rows = []
    for rec in candidate_records:
        if set(t["task_id"] for t in rec["tasks"]) != set(base):
            raise ValueError("task sets differ between records")
        per_task = {}
        for t in rec["tasks"]:
            if t["position"] == 1:
                continue
            per_task[t["task_id"]] = knowledge_transfer(
                t["final_score"], base[t["task_id"]])
        rows.append({
            "method": rec["algorithm"] + (f"_{rec['variant']}" if rec.get("variant") else ""),
            "per_task": per_task,
            "scores": scores_by_task(rec),
            "overall": overall_transfer(list(per_task.values())),
        })
    return {"schema_version": SCHEMA_VERSION,
            "task_ids": vanilla_record["task_order"],
            "vanilla_scores": base,
            "rows": rows}


def metric_table_csv(table: dict) -> str:
    """Published-table layout: per-task 'transfer% [score]' plus overall."""
    task_ids = table["task_ids"]
    lines = ["method," + ",".join(task_ids) + ",overall_transfer"]
    base = table["vanilla_scores"]
    cells = [f"[{base[t]:.2f}]" for t in task_ids]
    lines.append("vanilla," + ",".join(cells) + ",0.00")
    for row in table["rows"]:
        cells = []
        for t in task_ids:
            s = row["scores"][t]
            cells.append(f"{row['per_task'][t]:.2f}% [{s:.2f}]"
                         if t in row["per_task"] else f"[{s:.2f}]")
        lines.append(row["method"] + "," + ",".join(cells)
                     + f",{row['overall']:.2f}")
    return "\n".join(lines) + "\n"


def run_metrics(record: dict) -> dict:
    """Run-level metric block: decay and phase-three gain (engine runs)."""
    decays, gains = {}, {}
    for t in record["tasks"]:
        if t["position"] == 1:
            continue
        if t.get("improvise_score") is not None and t.get("initialize_score") is not None:
            if t["improvise_score"] > 0:
                decays[t["task_id"]] = distillation_decay(
                    t["improvise_score"], t["initialize_score"])
        if t.get("initialize_score") not in (None, 0):
            gains[t["task_id"]] = (t["initialize_score"], t["final_score"])
    out = {"distillation_decay": decays}
    if gains:
        out["average_phase3_gain"] = phase3_gain(list(gains.values()))
    return out


def param_report_rows(record: dict) -> list[tuple[int, str, int, int, int]]:
    rows = []
    algo = record["algorithm"] + (f"_{record['variant']}" if record.get("variant") else "")
    for t in record["tasks"]:
        c = t["param_counts"]
        rows.append((t["position"], algo, c["training_forward"],
                     c["inference"], c["total"]))
    return rows


def param_report_csv(records: Sequence[dict]) -> str:
    lines = ["task_step,algo,training_forward,inference,total"]
    for rec in records:
        for step, algo, tr, inf, tot in param_report_rows(rec):
            lines.append(f"{step},{algo},{tr},{inf},{tot}")
    return "\n".join(lines) + "\n"
