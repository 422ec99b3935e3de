"""Nodule-level evaluation: confusion metrics and rank-based ROC AUC.

Predictions threshold the class-1 probability at 0.5 with ties going to the
positive class. Metrics with a zero denominator are reported as an explicit
undefined marker (JSON null plus a reason), never as 0. AUC uses midranks,
so tied scores count one half, matching the trapezoidal area under the full
ROC sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


class UndefinedMetric(ValidationError):
    """Raised when a metric has no value; .reason explains why."""

    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def positives(self):
        return self.tp + self.fn

    @property
    def negatives(self):
        return self.tn + self.fp

    def to_json(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


METRIC_NAMES = ("auc", "acc", "sen", "spe", "ppv", "npv", "f1")


@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)  # name -> float or None
    reasons: dict = field(default_factory=dict)  # name -> why undefined
    counts: ConfusionCounts | None = None

    def to_json(self, decimals=4):
        metrics = {
            name: (None if value is None else round(float(value), decimals))
            for name, value in self.values.items()
        }
        out = {"metrics": metrics, "reasons": dict(self.reasons)}
        if self.counts is not None:
            out["counts"] = self.counts.to_json()
        return out


def _check_labels(labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValidationError("labels must be nonempty")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be binary 0/1")
    return labels.astype(np.int64)


def confusion(labels, probs, threshold=0.5):
    labels = _check_labels(labels)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValidationError(
            f"{labels.shape[0]} labels but {probs.shape} probabilities"
        )
    preds = (probs >= threshold).astype(np.int64)
    return ConfusionCounts(
        tp=int(((preds == 1) & (labels == 1)).sum()),
        fp=int(((preds == 1) & (labels == 0)).sum()),
        tn=int(((preds == 0) & (labels == 0)).sum()),
        fn=int(((preds == 0) & (labels == 1)).sum()),
    )


def _ratio(num, den, reason):
    if den == 0:
        return None, reason
    return num / den, None


def metric_suite(c):
    """All thresholded metrics; AUC is left unset (score-based, added by
    evaluation_report)."""
    values, reasons = {}, {}

    def put(name, value, reason):
        values[name] = value
        if reason is not None:
            reasons[name] = reason

    put("acc", *_ratio(c.tp + c.tn, c.total, "no samples"))
    put("sen", *_ratio(c.tp, c.tp + c.fn, "no positive samples (tp+fn=0)"))
    put("spe", *_ratio(c.tn, c.tn + c.fp, "no negative samples (tn+fp=0)"))
    put("ppv", *_ratio(c.tp, c.tp + c.fp, "no positive predictions (tp+fp=0)"))
    put("npv", *_ratio(c.tn, c.tn + c.fn, "no negative predictions (tn+fn=0)"))
    if values["ppv"] is None or values["sen"] is None:
        put("f1", None, "f1 needs defined ppv and sen")
    else:
        put("f1", *_ratio(2 * values["ppv"] * values["sen"],
                          values["ppv"] + values["sen"],
                          "ppv and sen are both zero"))
    return MetricsReport(values=values, reasons=reasons, counts=c)


def _midranks(x):
    """1-based ranks with ties averaged."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j < n and sorted_x[j] == sorted_x[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def roc_auc(labels, scores):
    """Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 P(tie)."""
    labels = _check_labels(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ValidationError(f"{labels.shape[0]} labels but {scores.shape} scores")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric(
            f"AUC undefined: need both classes, got {n_pos} positives and {n_neg} negatives"
        )
    ranks = _midranks(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_points(labels, scores):
    """ROC sweep as (fpr, tpr, threshold) rows from (0,0) to (1,1).

    Thresholds are the distinct scores in descending order; a point is added
    after each group of ties, so the curve's trapezoidal area equals roc_auc.
    """
    labels = _check_labels(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC undefined: need both classes")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i:j].sum())
        fp += (j - i) - int(sorted_labels[i:j].sum())
        points.append((fp / n_neg, tp / n_pos, float(sorted_scores[i])))
        i = j
    return points


def roc_csv(points):
    lines = ["fpr,tpr,threshold"]
    for fpr, tpr, threshold in points:
        lines.append(f"{fpr:.6f},{tpr:.6f},{threshold:.6g}")
    return "\n".join(lines) + "\n"


def evaluation_report(labels, probs, nodule_ids=None, threshold=0.5):
    """Full JSON-ready report: counts, metrics (with AUC), per-nodule rows."""
    labels = _check_labels(labels)
    probs = np.asarray(probs, dtype=np.float64)
    counts = confusion(labels, probs, threshold)
    report = metric_suite(counts)
    try:
        report.values["auc"] = roc_auc(labels, probs)
    except UndefinedMetric as exc:
        report.values["auc"] = None
        report.reasons["auc"] = exc.reason
    out = report.to_json()
    ordered = {name: out["metrics"].get(name) for name in METRIC_NAMES}
    out["metrics"] = ordered
    if nodule_ids is not None:
        if len(nodule_ids) != len(labels):
            raise ValidationError(
                f"{len(nodule_ids)} nodule ids but {len(labels)} labels"
            )
        out["per_nodule"] = [
            {"nodule_id": rid, "prob": round(float(p), 6), "label": int(y)}
            for rid, p, y in zip(nodule_ids, probs, labels)
        ]
    return out
