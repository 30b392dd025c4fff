"""Detection metrics: rank-based AUROC and percentile-threshold balanced accuracy."""

from __future__ import annotations

import numpy as np

from .errors import InputError


def _ratio(num2: int, den2: int) -> float:
    """num2/den2 for doubled integers, folded through 0.5.

    Folding makes the complement identity exact in floating point:
    _ratio(x, d) + _ratio(d - x, d) == 1.0 bitwise for every 0 <= x <= d.
    """
    if 2 * num2 <= den2:
        return num2 / den2
    return 1.0 - (den2 - num2) / den2


def _midranks2(pooled: np.ndarray) -> np.ndarray:
    """Twice the 1-based midrank of every score (an exact integer array)."""
    order = np.argsort(pooled, kind="mergesort")
    sorted_scores = pooled[order]
    n = len(pooled)
    rank2 = np.empty(n, dtype=np.int64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # Tied block occupies ranks i+1 .. j+1; twice the average is an integer.
        rank2[order[i : j + 1]] = (i + 1) + (j + 1)
        i = j + 1
    return rank2


def auroc(scores_known: np.ndarray, scores_new: np.ndarray) -> float:
    """Probability that a random known score exceeds a random new score.

    Ties count one half; equals the Mann-Whitney U statistic normalized by
    the pair count. Computed from integer rank sums, so it matches a
    brute-force pairwise count exactly and auroc(a, b) + auroc(b, a) == 1.0
    holds bitwise.
    """
    known = np.asarray(scores_known, dtype=np.float64)
    new = np.asarray(scores_new, dtype=np.float64)
    if known.size == 0 or new.size == 0:
        raise InputError("auroc needs at least one score in each group")
    if not (np.isfinite(known).all() and np.isfinite(new).all()):
        raise InputError("auroc scores must be finite")
    n, m = known.size, new.size
    rank2 = _midranks2(np.concatenate([known, new]))
    r2_known = int(rank2[:n].sum())
    u2 = r2_known - n * (n + 1)  # twice the U statistic
    return _ratio(u2, 2 * n * m)


def balanced_accuracy(scores: np.ndarray, is_known: np.ndarray, percentile: float | None = None) -> float:
    """(sensitivity + specificity) / 2 with a percentile-derived threshold.

    The threshold sits at the q-th percentile of all scores where q defaults
    to the empirical new-class share, so perfect separation scores 1.0.
    Samples strictly above the threshold are predicted known.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_known = np.asarray(is_known, dtype=bool)
    if scores.shape != is_known.shape:
        raise InputError("scores and is_known must align")
    n_known = int(is_known.sum())
    n_new = int((~is_known).sum())
    if n_known == 0 or n_new == 0:
        raise InputError("balanced_accuracy needs both classes present")
    if percentile is None:
        percentile = 100.0 * n_new / (n_known + n_new)
    threshold = np.percentile(scores, percentile)
    predicted_known = scores > threshold
    sensitivity = predicted_known[is_known].mean()
    specificity = (~predicted_known)[~is_known].mean()
    return float((sensitivity + specificity) / 2.0)


def roc_points(scores_known: np.ndarray, scores_new: np.ndarray) -> np.ndarray:
    """ROC staircase as rows of (fpr, tpr, threshold), threshold descending."""
    known = np.asarray(scores_known, dtype=np.float64)
    new = np.asarray(scores_new, dtype=np.float64)
    if known.size == 0 or new.size == 0:
        raise InputError("roc_points needs at least one score in each group")
    thresholds = np.unique(np.concatenate([known, new]))[::-1]
    rows = [(0.0, 0.0, np.inf)]
    for thr in thresholds:
        tpr = float((known >= thr).mean())
        fpr = float((new >= thr).mean())
        rows.append((fpr, tpr, float(thr)))
    return np.asarray(rows)


def summarize(values: list[float]) -> dict:
    """Mean/std/min/max summary; std only when there are >= 2 values."""
    arr = np.asarray(values, dtype=np.float64)
    out = {
        "mean": float(arr.mean()),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "n": int(arr.size),
    }
    out["std"] = float(arr.std(ddof=0)) if arr.size >= 2 else None
    return out
