"""ROC-AUC as a rank statistic, and probability averaging across models."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from reintel import ReintelError


class EvaluationError(ReintelError, ValueError):
    pass


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    start = 0
    n = len(values)
    while start < n:
        end = start + 1
        while end < n and sorted_vals[end] == sorted_vals[start]:
            end += 1
        ranks[order[start:end]] = (start + 1 + end) / 2.0
        start = end
    return ranks


def roc_auc(labels, scores) -> float:
    """P(score of random positive > score of random negative), ties counting 1/2.

    Computed exactly from the Mann-Whitney U statistic with average ranks.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise EvaluationError(f"labels {labels.shape} and scores {scores.shape} must be equal-length vectors")
    if not np.isin(labels, (0, 1)).all():
        raise EvaluationError("labels must be 0 or 1")
    if np.isnan(scores).any():
        raise EvaluationError("scores contain NaN")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC-AUC needs at least one positive and one negative label")
    ranks = average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ensemble_average(score_sets: Sequence) -> np.ndarray:
    if len(score_sets) == 0:
        raise EvaluationError("need at least one score vector")
    arrays = [np.asarray(s, dtype=np.float64) for s in score_sets]
    lengths = {a.shape for a in arrays}
    if len(lengths) != 1 or arrays[0].ndim != 1:
        raise EvaluationError(f"score vectors must share one length, got shapes {sorted(lengths)}")
    stacked = np.stack(arrays)
    if ((stacked < 0) | (stacked > 1)).any():
        raise EvaluationError("scores must lie in [0, 1]")
    return stacked.mean(axis=0)


def evaluation_report(labels, scores) -> dict[str, float | int]:
    labels = np.asarray(labels)
    return {
        "auc": roc_auc(labels, scores),
        "n": int(len(labels)),
        "positives": int((labels == 1).sum()),
    }


def write_report(path: str | Path, report: dict) -> None:
    lines = []
    for key, value in report.items():
        lines.append(f"{key}={value:.6f}" if isinstance(value, float) else f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
