"""Command-line front end.

Subcommands: gen, pretrain, run, metrics, gradcheck, plot. Every command is
deterministic given (config, seed). Exit codes: 0 success, 1 config error,
2 runtime error, 3 acceptance/audit failure (forgetting audit, digest
mismatch, failed gradient check).

The output root is resolved from --out, then run.out_dir in the config, then
the I2ILAB_OUT environment variable, then ./runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .backbone import backbone_from_blocks, backbone_to_blocks
from .checkpoint import (
    CheckpointError,
    blocks_digest,
    config_digest,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, apply_override, backbone_config, hyper_config, load_config
from .harness import (
    CLSchedule,
    ForgettingAuditError,
    TaskData,
    metric_table_csv,
    param_report_csv,
    param_report_rows,
    record_digest,
    record_to_json,
    run_metrics,
    run_schedule,
    transfer_table,
)
from .plots import param_growth_svg, transfer_bars_svg
from .tasks import (
    RevokedDataError,
    file_digest,
    generate_task,
    pretrain_corpus,
    save_dataset,
    suite_tasks,
    task_orders,
)
from .training import pretrain_backbone, pretrain_report

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_AUDIT = 0, 1, 2, 3


class AuditFailure(RuntimeError):
    """Integrity violation: digest mismatch or failed verification."""


def _out_root(args, cfg) -> Path:
    root = (getattr(args, "out", None) or cfg["run"]["out_dir"]
            or os.environ.get("I2ILAB_OUT") or "runs")
    return Path(root)


def _load_cfg(args) -> dict:
    cfg = load_config(getattr(args, "config", None))
    for assignment in getattr(args, "set", None) or []:
        apply_override(cfg, assignment)
    if getattr(args, "algo", None):
        cfg["run"]["algo"] = args.algo
        if args.algo != "i2i":
            cfg["run"]["variant"] = None
    if getattr(args, "variant", None):
        if cfg["run"]["algo"] != "i2i":
            raise ConfigError("--variant only applies to the i2i algorithm")
        cfg["run"]["variant"] = args.variant
    if getattr(args, "order", None) is not None:
        cfg["run"]["order"] = args.order
    if getattr(args, "seed", None) is not None:
        cfg["run"]["seed"] = args.seed
    if cfg["run"]["algo"] == "i2i" and cfg["run"]["variant"] is None:
        cfg["run"]["variant"] = "FF"
    if not 1 <= cfg["run"]["order"] <= 3:
        raise ConfigError("run.order must be 1, 2, or 3")
    return cfg


def _suite(cfg):
    t = cfg["tasks"]
    return suite_tasks(t["suite_seed"], t["train_size"], t["val_size"],
                       cfg["backbone"]["feature_dim"])


def _stamp_digest(cfg) -> str:
    return config_digest({"backbone": cfg["backbone"], "tasks": cfg["tasks"],
                          "pretrain": cfg["pretrain"]})


def cmd_gen(args) -> int:
    cfg = _load_cfg(args)
    root = _out_root(args, cfg)
    data_dir = root / "data"
    manifest_path = data_dir / "manifest.json"
    tasks = _suite(cfg)
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        for name, digest in manifest["files"].items():
            path = data_dir / name
            if not path.exists() or file_digest(path) != digest:
                raise AuditFailure(f"dataset file {name} does not match its "
                                   "recorded digest")
        print(f"up-to-date: {data_dir}")
        return EXIT_OK
    data_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    from .tasks import get_codebook
    for task in tasks:
        train, val = generate_task(task)
        files[f"{task.task_id}.train.jsonl"] = save_dataset(
            data_dir / f"{task.task_id}.train.jsonl", train)
        files[f"{task.task_id}.val.jsonl"] = save_dataset(
            data_dir / f"{task.task_id}.val.jsonl", val)
    pre_tr, pre_va = pretrain_corpus(cfg["pretrain"]["seed"],
                                     cfg["pretrain"]["corpus_size"],
                                     cfg["pretrain"]["corpus_val_size"],
                                     cfg["backbone"]["feature_dim"])
    files["pretrain.train.jsonl"] = save_dataset(data_dir / "pretrain.train.jsonl", pre_tr)
    files["pretrain.val.jsonl"] = save_dataset(data_dir / "pretrain.val.jsonl", pre_va)
    manifest = {
        "schema_version": 1,
        "suite_seed": cfg["tasks"]["suite_seed"],
        "train_size": cfg["tasks"]["train_size"],
        "val_size": cfg["tasks"]["val_size"],
        "codebook_digest": get_codebook(cfg["tasks"]["suite_seed"],
                                        cfg["backbone"]["feature_dim"]).digest(),
        "files": files,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"wrote {len(files)} dataset files to {data_dir}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    root = _out_root(args, cfg)
    ckpt_path = root / "backbone.ckpt"
    if ckpt_path.exists():
        raise ConfigError(f"checkpoint already exists: {ckpt_path} "
                          "(remove it or choose another output root)")
    root.mkdir(parents=True, exist_ok=True)
    bc = backbone_config(cfg)
    corpus = pretrain_corpus(cfg["pretrain"]["seed"],
                             cfg["pretrain"]["corpus_size"],
                             cfg["pretrain"]["corpus_val_size"],
                             bc.feature_dim)
    params, head0, _ = pretrain_backbone(bc, corpus, cfg["pretrain"]["seed"],
                                         cfg["pretrain"]["epochs"],
                                         hyper_config(cfg))
    save_checkpoint(ckpt_path, backbone_to_blocks(params, head0), _stamp_digest(cfg))
    report = pretrain_report(params, head0, corpus)
    print(f"wrote {ckpt_path}")
    print(f"mixture exact match {report['mixture_exact_match']:.2f}% "
          f"(majority answer floor {report['majority_fraction']:.2f}%)")
    return EXIT_OK


def _load_backbone(cfg, root: Path):
    ckpt_path = root / "backbone.ckpt"
    if not ckpt_path.exists():
        raise ConfigError(f"no backbone checkpoint at {ckpt_path}; "
                          "run `i2ilab pretrain` first")
    blocks, stamp = load_checkpoint(ckpt_path)
    if stamp != _stamp_digest(cfg):
        raise AuditFailure("backbone checkpoint was built from a different "
                           "config (digest mismatch)")
    return backbone_from_blocks(backbone_config(cfg), blocks)


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    root = _out_root(args, cfg)
    params, head0 = _load_backbone(cfg, root)
    tasks = _suite(cfg)
    order = task_orders(cfg["tasks"]["suite_seed"])[cfg["run"]["order"] - 1]
    ordered = [tasks[i] for i in order]
    data = [TaskData.wrap(t, *generate_task(t)) for t in ordered]
    schedule = CLSchedule(tasks=ordered, algorithm=cfg["run"]["algo"],
                          seed=cfg["run"]["seed"], variant=cfg["run"]["variant"],
                          hyper=hyper_config(cfg))
    out = run_schedule(schedule, params, head0, data)

    variant = f"_{cfg['run']['variant']}" if cfg["run"]["variant"] else ""
    run_dir = root / (f"{cfg['run']['algo']}{variant}_order{cfg['run']['order']}"
                      f"_seed{cfg['run']['seed']}")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "record.json").write_text(record_to_json(out.record))
    save_checkpoint(run_dir / "store.ckpt", out.store_blocks, _stamp_digest(cfg))
    (run_dir / "params.csv").write_text(param_report_csv([out.record]))
    (run_dir / "metrics.json").write_text(
        json.dumps(run_metrics(out.record), indent=1, sort_keys=True))
    # wall-clock diagnostics only; deliberately not part of the record
    (run_dir / "timings.json").write_text(json.dumps(out.timings, indent=1))
    print(f"wrote {run_dir} (record digest {record_digest(out.record)[:16]})")
    for t in out.record["tasks"]:
        print(f"  {t['task_id']}: {t['final_score']:.2f}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    vanilla = json.loads(Path(args.vanilla).read_text())
    candidates = [json.loads(Path(p).read_text()) for p in args.candidate]
    if vanilla.get("algorithm") != "vanilla":
        raise ConfigError("--vanilla must point to a vanilla-run record")
    try:
        table = transfer_table(vanilla, candidates)
    except ValueError as e:
        raise ConfigError(str(e))
    csv = metric_table_csv(table)
    if args.table_out:
        Path(args.table_out).write_text(csv)
        Path(args.table_out).with_suffix(".json").write_text(
            json.dumps(table, indent=1, sort_keys=True))
        print(f"wrote {args.table_out}")
    else:
        print(csv, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import full_suite_report
    rows = full_suite_report()
    failed = False
    for name, err, thr in rows:
        ok = err < thr
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: max rel err {err:.3e} "
              f"(threshold {thr:g})")
    if failed:
        raise AuditFailure("gradient verification failed")
    return EXIT_OK


def cmd_plot(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise ConfigError(f"input not found: {src}")
    text = src.read_text()
    if not text.strip():
        raise ConfigError("empty plot input")
    if src.suffix == ".json":
        table = json.loads(text)
        if "rows" not in table:
            raise ConfigError("JSON input is not a metric table")
        svg = transfer_bars_svg(table)
    else:
        lines = text.strip().splitlines()
        header = lines[0].split(",")
        if header != ["task_step", "algo", "training_forward", "inference", "total"]:
            raise ConfigError("CSV input is not a parameter report")
        rows = []
        for ln in lines[1:]:
            step, algo, tr, inf, tot = ln.split(",")
            rows.append((int(step), algo, int(tr), int(inf), int(tot)))
        if not rows:
            raise ConfigError("empty parameter report")
        svg = param_growth_svg(rows)
    Path(args.output).write_text(svg)
    print(f"wrote {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="i2ilab",
        description="Continual-learning lab: adapter initialization by "
                    "improvise-and-distill, with baselines and metrics.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, order_seed=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output root (overrides config/env)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        if order_seed:
            sp.add_argument("--seed", type=int, help="run seed")

    sp = sub.add_parser("gen", help="generate dataset files + manifest")
    common(sp, order_seed=False)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    common(sp, order_seed=False)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("run", help="run one continual-learning schedule")
    common(sp)
    sp.add_argument("--algo", choices=["vanilla", "adapterfusion",
                                       "closest_task_init", "i2i",
                                       "knowledge_free"])
    sp.add_argument("--variant", choices=["FF", "FL", "LL"])
    sp.add_argument("--order", type=int, choices=[1, 2, 3])
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("metrics", help="transfer table from run records")
    sp.add_argument("--vanilla", required=True, help="vanilla record.json")
    sp.add_argument("--candidate", required=True, nargs="+",
                    help="candidate record.json files")
    sp.add_argument("--table-out", help="write CSV (+ JSON sidecar) here")
    sp.set_defaults(fn=cmd_metrics)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("plot", help="render a report as a deterministic SVG")
    sp.add_argument("input", help="params.csv or metric-table .json")
    sp.add_argument("output", help="output .svg path")
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (AuditFailure, ForgettingAuditError) as e:
        print(f"audit failure: {e}", file=sys.stderr)
        return EXIT_AUDIT
    except (RevokedDataError, CheckpointError, OSError, FloatingPointError,
            ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
