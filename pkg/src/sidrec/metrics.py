"""Ranking metrics: global AUC plus per-user UAUC / GAUC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricUndefinedError(ValueError):
    pass


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    # 1-based average rank of each tie block
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Probability a positive outscores a negative; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs at least one positive and one negative")
    r = _average_ranks(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class RankMetrics:
    auc: float
    uauc: float | None
    gauc: float | None
    n_users: int


def rank_metrics(scored) -> RankMetrics:
    """``scored`` is an iterable of ``(user_id, score, label)``.

    UAUC averages per-user AUC over users with both classes; GAUC weights the
    same per-user values by each user's impression count. Both are ``None``
    when no user qualifies.
    """
    rows = list(scored)
    users = np.array([r[0] for r in rows])
    s = np.array([r[1] for r in rows], dtype=np.float64)
    y = np.array([r[2] for r in rows], dtype=np.int64)
    total = auc(s, y)
    vals, weights = [], []
    if len(rows):
        order = np.argsort(users, kind="stable")
        su = users[order]
        starts = np.flatnonzero(np.r_[True, su[1:] != su[:-1]])
        ends = np.r_[starts[1:], len(su)]
        for a, b in zip(starts, ends):
            idx = order[a:b]
            yy = y[idx]
            if 0 < yy.sum() < len(yy):
                vals.append(auc(s[idx], yy))
                weights.append(len(idx))
    if not vals:
        return RankMetrics(total, None, None, 0)
    vals = np.array(vals)
    weights = np.array(weights, dtype=np.float64)
    return RankMetrics(total, float(vals.mean()),
                       float((vals * weights).sum() / weights.sum()), len(vals))
