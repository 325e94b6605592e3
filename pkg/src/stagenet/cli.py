"""Command-line front end.

Subcommands:

* ``run``       -- one method (the config's) across its seeds.
* ``matrix``    -- several methods side by side, same data and seeds.
* ``eval``      -- re-score a saved checkpoint against its config.
* ``selfcheck`` -- the built-in numeric diagnostics.
* ``report``    -- re-render tables and figures from saved results.

Trial outputs land under an output root resolved from ``--out``, the
``STAGENET_OUT_ROOT`` environment variable, or the config's
``output_dir``, in that order.  Every run writes ``results.json`` (the
raw per-seed numbers) next to the rendered report, so reports can always
be rebuilt without retraining.  A run that loses trials to exceptions
writes ``failure.json`` naming each casualty and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .checkpoint import load_checkpoint
from .config import ConfigError, ExperimentConfig, available_presets, load_config, load_preset
from .continual import (
    MethodKind,
    StageFailure,
    evaluate_error,
    forward_logits,
    run_sequence,
)
from .data import multi_center_split, train_val_split
from .engine import ValidationError, softmax
from .metrics import EvalResult, roc_auc
from .report import write_report
from .selfcheck import run_all

ALL_METHODS = tuple(m.value for m in MethodKind)


def _add_config_args(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="path to an experiment JSON file")
    src.add_argument("--preset", help="name of a packaged preset")
    p.add_argument("--out", help="output directory (overrides config and environment)")


def _parser():
    p = argparse.ArgumentParser(
        prog="stagenet",
        description="sequential training experiments on small convolutional nets")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train the config's method across its seeds")
    _add_config_args(run)
    run.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    run.add_argument("--threads", type=int, default=1, help="parallel trials (default 1)")
    run.set_defaults(func=cmd_run)

    matrix = sub.add_parser("matrix", help="compare methods on the same data and seeds")
    _add_config_args(matrix)
    matrix.add_argument("--methods", default=",".join(ALL_METHODS),
                        help="comma-separated method names (default: all)")
    matrix.add_argument("--threads", type=int, default=1)
    matrix.set_defaults(func=cmd_matrix)

    ev = sub.add_parser("eval", help="re-score a saved stage checkpoint")
    _add_config_args(ev)
    ev.add_argument("--checkpoint", required=True, help="path to a .ckpt file")
    ev.set_defaults(func=cmd_eval)

    sc = sub.add_parser("selfcheck", help="run the numeric diagnostics")
    sc.add_argument("--seed", type=int, default=0)
    sc.set_defaults(func=cmd_selfcheck)

    rep = sub.add_parser("report", help="re-render tables and figures from results.json")
    rep.add_argument("--results", required=True, help="path to a results.json file")
    rep.add_argument("--out", help="directory to render into (default: alongside the file)")
    rep.set_defaults(func=cmd_report)
    return p


def _load_experiment(args):
    if args.preset:
        return load_preset(args.preset)
    return load_config(args.config)


def _resolve_out(args, cfg):
    if args.out:
        return args.out
    root = os.environ.get("STAGENET_OUT_ROOT")
    if root:
        return os.path.join(root, cfg.output_dir)
    return cfg.output_dir


def _result_row(res):
    row = {"seed": res.seed, "stage_errors": [float(e) for e in res.stage_errors],
           "retention": float(res.retention)}
    if res.auc is not None:
        row["auc"] = float(res.auc)
        row["roc_points"] = [[float(f), float(t)] for f, t in res.roc_points]
    return row


def _row_result(row):
    roc = row.get("roc_points")
    return EvalResult(stage_errors=row["stage_errors"], retention=row["retention"],
                      seed=row["seed"], auc=row.get("auc"),
                      roc_points=None if roc is None else [tuple(p) for p in roc])


def _run_trials(configs, seeds, out_root, threads):
    """Run (method, seed) jobs, possibly in parallel; order never varies.

    Returns (results, failures): results maps method -> per-seed EvalResults
    in the given seed order; failures lists dicts describing lost trials.
    """
    jobs = [(m, s) for m in configs for s in seeds]

    def one(job):
        method, seed = job
        d = os.path.join(out_root, method, f"seed{seed}")
        return run_sequence(configs[method], seed, out_dir=d)

    outcomes = {}
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        for job, fut in [(j, ex.submit(one, j)) for j in jobs]:
            try:
                outcomes[job] = fut.result()
            except Exception as exc:  # noqa: BLE001 - recorded, then reported
                outcomes[job] = exc

    results, failures = {}, []
    for method in configs:
        rows = []
        for seed in seeds:
            out = outcomes[(method, seed)]
            if isinstance(out, Exception):
                entry = {"method": method, "seed": seed, "error": str(out)}
                if isinstance(out, StageFailure):
                    entry["stage"] = out.stage
                failures.append(entry)
            else:
                rows.append(out)
        if rows:
            results[method] = rows
    return results, failures


def _write_results_json(path, configs, stages, results):
    doc = {"stages": stages,
           "config_hashes": {m: c.config_hash() for m, c in configs.items()},
           "methods": {m: [_result_row(r) for r in rows] for m, rows in results.items()}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _finish(configs, results, failures, seeds, out_root, summary_cfg=None):
    stages = next(iter(configs.values())).stages
    os.makedirs(out_root, exist_ok=True)
    if results:
        _write_results_json(os.path.join(out_root, "results.json"),
                            configs, stages, results)
        complete = {m: rows for m, rows in results.items() if len(rows) == len(seeds)}
        if complete:
            for p in write_report(out_root, complete, summary_cfg):
                print(f"wrote {p}")
    if failures:
        fpath = os.path.join(out_root, "failure.json")
        with open(fpath, "w", encoding="utf-8") as fh:
            json.dump({"failed": failures,
                       "completed": [{"method": m, "seed": r.seed}
                                     for m, rows in results.items() for r in rows]},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"{len(failures)} trial(s) failed; wrote {fpath}", file=sys.stderr)
        return 1
    return 0


def _print_aggregate(results):
    for method, rows in results.items():
        errs = np.mean([r.stage_errors for r in rows], axis=0)
        ret = float(np.mean([r.retention for r in rows]))
        line = (f"{method}: stage errors " +
                " ".join(f"{e:.4f}" for e in errs) + f", retention {ret:.4f}")
        aucs = [r.auc for r in rows if r.auc is not None]
        if len(aucs) == len(rows):
            line += f", auc {float(np.mean(aucs)):.4f}"
        print(line)


def cmd_run(args):
    cfg = _load_experiment(args)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    out_root = _resolve_out(args, cfg)
    configs = {cfg.method.value: cfg}
    results, failures = _run_trials(configs, seeds, out_root, args.threads)
    _print_aggregate(results)
    return _finish(configs, results, failures, seeds, out_root, summary_cfg=cfg)


def cmd_matrix(args):
    cfg = _load_experiment(args)
    names = [n.strip() for n in args.methods.split(",") if n.strip()]
    if not names:
        raise ConfigError("--methods: no method names given")
    configs = {}
    for n in names:
        kind = MethodKind.from_string(n)
        if kind.value in configs:
            raise ConfigError(f"--methods: '{kind.value}' listed twice")
        configs[kind.value] = cfg.with_method(kind)
    seeds = list(cfg.seeds)
    out_root = _resolve_out(args, cfg)
    results, failures = _run_trials(configs, seeds, out_root, args.threads)
    _print_aggregate(results)
    return _finish(configs, results, failures, seeds, out_root)


def cmd_eval(args):
    cfg = _load_experiment(args)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.config_hash and ckpt.config_hash != cfg.config_hash():
        print(f"error: checkpoint was trained under config {ckpt.config_hash[:12]}..., "
              f"given config hashes to {cfg.config_hash()[:12]}...", file=sys.stderr)
        return 2

    net = cfg.build_network()
    test_ds = cfg.build_test_dataset()
    test_labels = test_ds.fine_labels if cfg.dual_head else test_ds.labels
    test_err = evaluate_error(net, ckpt.params, test_ds.images, test_labels,
                              eval_batch=cfg.eval_batch)

    train_ds = cfg.build_train_dataset()
    pool, _ = train_val_split(train_ds, cfg.data.val_count, ckpt.seed)
    split = multi_center_split(train_ds, cfg.stages, ckpt.seed, pool_ids=pool)
    rows = train_ds.rows(split.chunks[0])
    task_labels = train_ds.fine_labels if cfg.dual_head else train_ds.labels
    retention = 1.0 - evaluate_error(net, ckpt.params, train_ds.images[rows],
                                     task_labels[rows], eval_batch=cfg.eval_batch)

    doc = {"checkpoint": args.checkpoint, "stage": ckpt.stage, "seed": ckpt.seed,
           "val_error": ckpt.val_error, "test_error": test_err, "retention": retention}
    if cfg.dual_head and "aux_head" in ckpt.params.groups:
        logits = forward_logits(net, ckpt.params, test_ds.images, "aux_head",
                                cfg.eval_batch)
        scores = softmax(logits)[:, cfg.data.positive_class]
        auc, _ = roc_auc(scores, (test_ds.labels == cfg.data.positive_class).astype(np.int64))
        doc["auc"] = float(auc)
    print(json.dumps(doc, indent=2, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        p = os.path.join(args.out, "eval.json")
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"wrote {p}", file=sys.stderr)
    return 0


def cmd_selfcheck(args):
    results = run_all(seed=args.seed)
    ok = True
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
        ok = ok and r.passed
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if ok else 1


def cmd_report(args):
    with open(args.results, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    results = {m: [_row_result(row) for row in rows]
               for m, rows in doc.get("methods", {}).items()}
    if not results:
        print(f"error: {args.results} holds no trials", file=sys.stderr)
        return 2
    out = args.out or os.path.dirname(os.path.abspath(args.results))
    for p in write_report(out, results):
        print(f"wrote {p}")
    return 0


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
