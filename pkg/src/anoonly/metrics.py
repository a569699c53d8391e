"""Rank metrics over anomaly scores (higher score = more anomalous)."""
from __future__ import annotations

import numpy as np

from .errors import ShapeError, UndefinedMetricError


def _prepare(scores, is_anomaly) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(is_anomaly).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ShapeError("scores and truth differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    block_rank = (starts + 1 + ends) / 2.0
    ranks = np.empty(len(values))
    ranks[order] = np.repeat(block_rank, ends - starts)
    return ranks


def aucroc(scores, is_anomaly) -> float:
    """P(random anomaly outranks random normal), ties counting one half."""
    s, y = _prepare(scores, is_anomaly)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUCROC needs both anomalies and normals")
    rank_sum = average_ranks(s)[y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _average_precision(s: np.ndarray, positive: np.ndarray) -> float:
    # tied scores enter as one threshold block, so AP ignores order within ties
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    pos_sorted = positive[order]
    block_end = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    tp = np.cumsum(pos_sorted)[block_end]
    seen = np.flatnonzero(block_end) + 1
    d_tp = np.diff(np.r_[0, tp])
    return float((d_tp * (tp / seen)).sum() / positive.sum())


def aucpr_anomaly(scores, is_anomaly) -> float:
    s, y = _prepare(scores, is_anomaly)
    if not y.any():
        raise UndefinedMetricError("AUCPR w.r.t. anomaly needs at least one anomaly")
    return _average_precision(s, y)


def aucpr_normal(scores, is_anomaly) -> float:
    s, y = _prepare(scores, is_anomaly)
    if y.all():
        raise UndefinedMetricError("AUCPR w.r.t. normal needs at least one normal")
    return _average_precision(-s, ~y)


def all_metrics(scores, is_anomaly) -> dict[str, float]:
    return {
        "aucroc": aucroc(scores, is_anomaly),
        "aucpr_anomaly": aucpr_anomaly(scores, is_anomaly),
        "aucpr_normal": aucpr_normal(scores, is_anomaly),
    }
