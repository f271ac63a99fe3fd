"""Calibration pilot: one (noise, epochs) setting across all three orders.

Usage: python3 scripts/pilot.py NOISE EPOCHS SEED OUT_JSON
"""
import json
import sys
import time

import numpy as np

import i2ilab.tasks as T
from i2ilab.backbone import BackboneConfig
from i2ilab.harness import CLSchedule, TaskData, run_schedule
from i2ilab.tasks import generate_task, pretrain_corpus, suite_tasks, task_orders
from i2ilab.training import Hyper, pretrain_backbone, pretrain_report


def main():
    noise, epochs, seed, out_path = (float(sys.argv[1]), int(sys.argv[2]),
                                     int(sys.argv[3]), sys.argv[4])
    T.NOISE_FRACTION = noise
    T._CODEBOOKS.clear()
    cfg = BackboneConfig()
    corpus = pretrain_corpus(0, size=3000, val_size=500)
    params, head0, _ = pretrain_backbone(cfg, corpus, seed=0, epochs=6)
    em = pretrain_report(params, head0, corpus)["mixture_exact_match"]
    tasks = suite_tasks(0)
    gen = {t.task_id: generate_task(t) for t in tasks}
    hyper = Hyper().with_epochs(epochs)
    report = {"noise": noise, "epochs": epochs, "seed": seed,
              "pretrain_em": em, "orders": []}

    for oi, order in enumerate(task_orders(0)):
        ordered = [tasks[i] for i in order]

        def run(algo, variant=None):
            data = [TaskData.wrap(t, *gen[t.task_id]) for t in ordered]
            sched = CLSchedule(tasks=ordered, algorithm=algo, seed=seed,
                               variant=variant, hyper=hyper)
            return run_schedule(sched, params, head0, data)

        t0 = time.time()
        recs = {"vanilla": run("vanilla").record,
                "knowledge_free": run("knowledge_free").record,
                "ff": run("i2i", "FF").record,
                "fl": run("i2i", "FL").record,
                "ll": run("i2i", "LL").record,
                "adapterfusion": run("adapterfusion").record}
        report["orders"].append({
            "order": [t.task_id for t in ordered],
            "seconds": time.time() - t0,
            "records": recs,
        })
        with open(out_path, "w") as f:
            json.dump(report, f)
        print(f"order {oi} done in {time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
