"""Result tables and figures.

Everything here is a pure function of the trial results it is given, and
the files it writes are byte-stable: fixed float formatting, no
timestamps, no environment strings, figures rendered off-screen with the
software tag stripped.  Running the same experiment twice must produce
identical report files, so reports can be diffed to detect drift.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .engine import ValidationError
from .metrics import aggregate_trials

_FIG_DPI = 100
# keep every savefig byte-reproducible: matplotlib otherwise stamps its
# own version string into the PNG header
_PNG_META = {"metadata": {"Software": None}}


def _fmt(x, digits=6):
    return f"{float(x):.{digits}f}"


def format_mean_std(mean, std, digits=4):
    """Render an aggregate cell, e.g. ``0.1250 (0.0083)``."""
    return f"{float(mean):.{digits}f} ({float(std):.{digits}f})"


def _check_results(results):
    if not results:
        raise ValidationError("no methods to report")
    stage_counts = {len(trials[0].stage_errors) for trials in results.values()}
    if len(stage_counts) != 1:
        raise ValidationError(f"methods report different stage counts: {stage_counts}")
    return stage_counts.pop()


def write_trials(path, results):
    """One row per (method, seed): the raw numbers behind every aggregate."""
    stages = _check_results(results)
    cols = [f"stage{k}_error" for k in range(1, stages + 1)]
    lines = ["method,seed," + ",".join(cols) + ",retention,auc"]
    for method, trials in results.items():
        for r in sorted(trials, key=lambda t: t.seed):
            row = [method, str(r.seed)]
            row += [_fmt(e) for e in r.stage_errors]
            row.append(_fmt(r.retention))
            row.append("" if r.auc is None else _fmt(r.auc))
            lines.append(",".join(row))
    _write_text(path, lines)


def write_errors_by_stage(path, results):
    """Stage rows x method columns of seed-mean test error."""
    stages = _check_results(results)
    methods = list(results)
    lines = ["stage," + ",".join(methods)]
    aggs = {m: aggregate_trials(results[m]) for m in methods}
    for k in range(stages):
        cells = [_fmt(aggs[m]["stage_errors"][k][0]) for m in methods]
        lines.append(f"{k + 1}," + ",".join(cells))
    _write_text(path, lines)


def write_matrix(path, results):
    """Method rows: per-stage error and retention as ``mean (std)`` cells."""
    stages = _check_results(results)
    header = ["method"] + [f"stage{k}_error" for k in range(1, stages + 1)] + ["retention"]
    has_auc = all(all(r.auc is not None for r in trials) for trials in results.values())
    if has_auc:
        header.append("auc")
    lines = [",".join(header)]
    for method, trials in results.items():
        agg = aggregate_trials(trials)
        cells = [method]
        cells += [format_mean_std(m, s) for m, s in agg["stage_errors"]]
        cells.append(format_mean_std(*agg["retention"]))
        if has_auc:
            cells.append(format_mean_std(*agg["auc"]))
        lines.append(",".join(cells))
    _write_text(path, lines)


def write_roc(path, roc_points):
    """Two-column table of the ROC sweep."""
    if not roc_points:
        raise ValidationError("no roc points to write")
    lines = ["fpr,tpr"] + [f"{_fmt(f)},{_fmt(t)}" for f, t in roc_points]
    _write_text(path, lines)


def write_summary(path, results, config=None):
    """Machine-readable aggregate of every method's trials."""
    _check_results(results)
    doc = {"methods": {}}
    if config is not None:
        doc["config_hash"] = config.config_hash()
        doc["stages"] = config.stages
        doc["seeds"] = list(config.seeds)
    for method, trials in results.items():
        agg = aggregate_trials(trials)
        entry = {
            "seeds": agg["seeds"],
            "stage_errors": [[m, s] for m, s in agg["stage_errors"]],
            "retention": list(agg["retention"]),
        }
        if "auc" in agg:
            entry["auc"] = list(agg["auc"])
        doc["methods"][method] = entry
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_text(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def render_error_curves(path, results):
    """Mean test error per stage, one line per method."""
    stages = _check_results(results)
    xs = np.arange(1, stages + 1)
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=_FIG_DPI)
    for method, trials in results.items():
        agg = aggregate_trials(trials)
        means = [m for m, _ in agg["stage_errors"]]
        stds = [s for _, s in agg["stage_errors"]]
        ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3, label=method)
    ax.set_xlabel("training stage")
    ax.set_ylabel("test error")
    ax.set_xticks(xs)
    ax.set_ylim(bottom=0.0)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_PNG_META)
    plt.close(fig)


def render_retention_bars(path, results):
    """Final-model retention on the first chunk, one bar per method."""
    _check_results(results)
    methods = list(results)
    aggs = [aggregate_trials(results[m]) for m in methods]
    means = [a["retention"][0] for a in aggs]
    stds = [a["retention"][1] for a in aggs]
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=_FIG_DPI)
    ax.bar(np.arange(len(methods)), means, yerr=stds, capsize=4,
           color="#4878a8", edgecolor="black", linewidth=0.8)
    ax.set_xticks(np.arange(len(methods)))
    ax.set_xticklabels(methods, rotation=30, ha="right")
    ax.set_ylabel("retention on first chunk")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_PNG_META)
    plt.close(fig)


def render_roc(path, roc_by_method):
    """ROC curves of the measurement head, one line per method."""
    if not roc_by_method:
        raise ValidationError("no roc curves to draw")
    fig, ax = plt.subplots(figsize=(5.0, 5.0), dpi=_FIG_DPI)
    for method, pts in roc_by_method.items():
        arr = np.asarray(pts, dtype=np.float64)
        ax.plot(arr[:, 0], arr[:, 1], label=method)
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, **_PNG_META)
    plt.close(fig)


def write_report(out_dir, results, config=None):
    """Write the full report bundle; returns the created file paths.

    `results` maps method name -> list of per-seed EvalResults (equal stage
    counts).  ROC output only appears when every trial carries a curve.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def emit(name, fn, *args):
        p = os.path.join(out_dir, name)
        fn(p, *args)
        paths.append(p)

    emit("trials.csv", write_trials, results)
    emit("errors_by_stage.csv", write_errors_by_stage, results)
    emit("matrix.csv", write_matrix, results)
    emit("summary.json", write_summary, results, config)
    emit("errors.png", render_error_curves, results)
    emit("retention.png", render_retention_bars, results)

    if all(all(r.roc_points is not None for r in trials) for trials in results.values()):
        curves = {}
        for method, trials in results.items():
            best = sorted(trials, key=lambda t: t.seed)[0]
            curves[method] = best.roc_points
            emit(f"roc_{method}.csv", write_roc, best.roc_points)
        emit("roc.png", render_roc, curves)
    return paths
