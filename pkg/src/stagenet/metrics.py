"""Evaluation metrics: error rate, retention, ROC/AUC, trial aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ValidationError


@dataclass
class EvalResult:
    """One trial's outcome: per-stage test errors plus final-model retention."""

    stage_errors: list
    retention: float
    seed: int
    auc: float | None = None
    roc_points: list | None = None

    def __post_init__(self):
        for e in self.stage_errors:
            if not 0.0 <= e <= 1.0:
                raise ValidationError(f"error rate {e} outside [0, 1]")
        if not 0.0 <= self.retention <= 1.0:
            raise ValidationError(f"retention {self.retention} outside [0, 1]")
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValidationError(f"AUC {self.auc} outside [0, 1]")


def predictions(logits):
    """Argmax class indices; ties resolve to the lowest index."""
    return np.argmax(np.asarray(logits), axis=-1)


def error_rate(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.size == 0:
        raise ValidationError("error_rate on empty input")
    if preds.shape != labels.shape:
        raise ValidationError(f"predictions {preds.shape} vs labels {labels.shape}")
    return float(np.mean(preds != labels))


def retention_fraction(preds, labels):
    """Fraction of the stage-1 chunk still classified correctly."""
    return 1.0 - error_rate(preds, labels)


def roc_auc(scores, labels):
    """Trapezoidal AUC with a threshold sweep that groups tied scores.

    Returns (auc, points) where points runs from (0,0) to (1,1) in
    (false positive rate, true positive rate) coordinates.  Grouping ties
    into a single threshold step makes the area equal to the pairwise
    ordering probability with ties counted 1/2.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be equal-length vectors")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = fp = 0
    points = [(0.0, 0.0)]
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:  # one step per distinct score
            j += 1
        tp += int(np.sum(y[i:j] == 1))
        fp += int(np.sum(y[i:j] == 0))
        points.append((fp / n_neg, tp / n_pos))
        i = j
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    auc = float(np.trapezoid(ys, xs))
    return auc, points


def ensemble_scores(per_trial_scores):
    """Mean of per-trial score arrays (softmax scores averaged before thresholding)."""
    stacked = np.stack([np.asarray(s, dtype=np.float64) for s in per_trial_scores])
    return stacked.mean(axis=0)


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population std


def aggregate_trials(results):
    """Mean (population std) per stage plus retention/AUC across trials."""
    if not results:
        raise ValidationError("no trials to aggregate")
    n_stages = len(results[0].stage_errors)
    for r in results:
        if len(r.stage_errors) != n_stages:
            raise ValidationError("trials report different stage counts")
    agg = {
        "seeds": [r.seed for r in results],
        "stage_errors": [_mean_std([r.stage_errors[k] for r in results])
                         for k in range(n_stages)],
        "retention": _mean_std([r.retention for r in results]),
    }
    if all(r.auc is not None for r in results):
        agg["auc"] = _mean_std([r.auc for r in results])
    return agg
