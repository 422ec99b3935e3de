"""Shared helpers for the test suite."""

import numpy as np


def grad_rel_err(analytic, numeric):
    """Worst-case relative disagreement between two gradient arrays.

    Denominator floors at 1 so near-zero entries are compared absolutely.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    num = np.abs(analytic - numeric)
    den = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((num / den).max())


def pairwise_auc(labels, scores):
    """Brute-force Mann-Whitney AUC with ties counted 1/2."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))
