"""General Search Unit: exact inner-product top-k over user histories."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

PUBLIC_POSITIVE_RATING = 4
PUBLIC_MIN_SEQ_LEN = 20
PUBLIC_TEST_FRACTION = 0.15
PUBLIC_RETRIEVAL_DEPTH = 50


class Event(NamedTuple):
    item_id: int
    timestamp: float
    flags: tuple = ()


@dataclass
class UserSequence:
    user_id: int
    events: list = field(default_factory=list)
    future: list = field(default_factory=list)   # held-out interactions, for evaluation

    def __post_init__(self):
        self.events = [e if isinstance(e, Event) else Event(*e) for e in self.events]
        ts = [e.timestamp for e in self.events]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"user {self.user_id}: timestamps must be non-decreasing")

    def items(self, flag: str | None = None) -> list:
        return [e.item_id for e in self.events if flag is None or flag in e.flags]


@dataclass
class RetrievalResult:
    entries: list   # [(item_id, score)], scores non-increasing
    k: int

    @property
    def ids(self) -> list:
        return [i for i, _ in self.entries]


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k largest scores; ties go to the earlier position."""
    n = scores.shape[0]
    if k >= n:
        return np.argsort(-scores, kind="stable")
    kth = np.partition(scores, n - k)[n - k]
    above = np.flatnonzero(scores > kth)
    ties = np.flatnonzero(scores == kth)[:k - above.shape[0]]
    cand = np.concatenate([above, ties])
    cand.sort()
    return cand[np.argsort(-scores[cand], kind="stable")]


def top_k_gsu(history_ids, history_vectors, target, k: int) -> RetrievalResult:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ids = list(history_ids)
    if not ids:
        return RetrievalResult([], k)
    hv = np.asarray(history_vectors, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if hv.ndim != 2 or hv.shape[0] != len(ids) or hv.shape[1] != t.shape[0]:
        raise ValueError(f"history {hv.shape} / target {t.shape} dimension mismatch")
    scores = hv @ t
    order = top_k_indices(scores, k)
    return RetrievalResult([(ids[i], float(scores[i])) for i in order], k)


class CatalogIndex:
    """Exact scan over an immutable catalog snapshot."""

    def __init__(self, ids, vectors):
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self._row = {int(i): r for r, i in enumerate(self.ids)}

    @classmethod
    def from_matrix(cls, m):
        return cls(m.ids, m.as_float64())

    def __contains__(self, item_id) -> bool:
        return int(item_id) in self._row

    def vector(self, item_id) -> np.ndarray:
        return self.vectors[self._row[int(item_id)]]

    def search(self, item_id, k: int, exclude_self: bool = True) -> list:
        """Top-k catalog items by inner product with ``item_id``'s vector."""
        scores = self.vectors @ self.vector(item_id)
        if exclude_self:
            scores = scores.copy()
            scores[self._row[int(item_id)]] = -np.inf
            k = min(k, len(scores) - 1)
        if k <= 0:
            return []
        order = top_k_indices(scores, k)
        return [(int(self.ids[i]), float(scores[i])) for i in order]


@dataclass
class PooledEvalResult:
    hr_macro: dict
    hr_micro: dict
    users_evaluated: int
    users_skipped: int


def pool_candidates(index: CatalogIndex, triggers, per_trigger_k: int) -> list:
    """Union of per-trigger retrievals, max score per item, best first."""
    best = {}
    for trig in triggers:
        for item, score in index.search(trig, per_trigger_k):
            if item not in best or score > best[item]:
                best[item] = score
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))


def pooled_retrieve_eval(index: CatalogIndex, triggers: dict, ground_truth: dict,
                         per_trigger_k: int = 50, ks=(200, 500)) -> PooledEvalResult:
    """HR@K of pooled trigger retrieval against each user's interacted items.

    ``triggers`` and ``ground_truth`` map user -> item list. Users without
    usable triggers or ground truth are skipped and counted.
    """
    ks = sorted({int(k) for k in ks})
    per_user = {k: [] for k in ks}
    hits_total = dict.fromkeys(ks, 0)
    truth_total = 0
    skipped = 0
    for user in sorted(triggers):
        trig = [t for t in triggers[user] if t in index]
        truth = set(ground_truth.get(user, ()))
        if not trig or not truth:
            skipped += 1
            continue
        ranked = [item for item, _ in pool_candidates(index, trig, per_trigger_k)]
        for k in ks:
            hit = len(truth.intersection(ranked[:k]))
            per_user[k].append(hit / len(truth))
            hits_total[k] += hit
        truth_total += len(truth)
    evaluated = len(per_user[ks[0]]) if ks else 0
    macro = {k: (float(np.mean(v)) if v else 0.0) for k, v in per_user.items()}
    micro = {k: (hits_total[k] / truth_total if truth_total else 0.0) for k in ks}
    return PooledEvalResult(macro, micro, evaluated, skipped)


def exclusive_rate(mine, baseline) -> float:
    mine, baseline = set(mine), set(baseline)
    if not mine:
        return 0.0
    return 100.0 * len(mine - baseline) / len(mine)


# --------------------------------------------------------------------------
# public rating-dataset preparation

@dataclass
class PreparedSample:
    user_id: int
    target: int
    label: int
    history: list           # item ids strictly before the target, oldest first
    depth: int = PUBLIC_RETRIEVAL_DEPTH


@dataclass
class PrepResult:
    train: list
    test: list
    malformed: int
    excluded_short: int
    excluded_one_class: int


def _parse_record(rec):
    user, item, rating, ts = rec
    rating = float(rating)
    ts = float(ts)
    if not (math.isfinite(rating) and math.isfinite(ts)):
        raise ValueError("non-finite field")
    return int(user), int(item), rating, ts


def prep_public_dataset(records, seed: int = 0, min_len: int = PUBLIC_MIN_SEQ_LEN,
                        positive_rating: float = PUBLIC_POSITIVE_RATING,
                        test_fraction: float = PUBLIC_TEST_FRACTION,
                        depth: int = PUBLIC_RETRIEVAL_DEPTH) -> PrepResult:
    """Turn ``(user, item, rating, time)`` records into per-user samples.

    Ratings at or above ``positive_rating`` are positives. Users with fewer
    than ``min_len`` events are dropped; each kept user yields its latest
    positive and latest negative event as samples, with the events before it
    as history. A seeded ``test_fraction`` of kept users forms the test split.
    """
    by_user: dict = {}
    malformed = 0
    for seq_no, rec in enumerate(records):
        try:
            user, item, rating, ts = _parse_record(rec)
        except (ValueError, TypeError):
            malformed += 1
            continue
        by_user.setdefault(user, []).append((ts, seq_no, item, rating))
    if malformed:
        log.warning("skipped %d malformed rating records", malformed)

    kept, short, one_class = {}, 0, 0
    for user in sorted(by_user):
        events = sorted(by_user[user])
        if len(events) < min_len:
            short += 1
            continue
        labels = [1 if r >= positive_rating else 0 for *_, r in events]
        samples = []
        for want in (1, 0):
            pos = max((i for i, lab in enumerate(labels) if lab == want), default=None)
            if pos is None:
                break
            samples.append(PreparedSample(user, events[pos][2], want,
                                          [e[2] for e in events[:pos]], depth))
        if len(samples) < 2:
            one_class += 1
            continue
        kept[user] = samples

    users = sorted(kept)
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * len(users)))
    test_users = set(rng.permutation(users)[:n_test].tolist()) if users else set()
    train = [s for u in users if u not in test_users for s in kept[u]]
    test = [s for u in users if u in test_users for s in kept[u]]
    return PrepResult(train, test, malformed, short, one_class)


def gsu_subsequence(sample: PreparedSample, index: CatalogIndex | None) -> list:
    """History items selected for a sample's target, at most ``sample.depth``.

    With an embedding index this is the inner-product top-k against the
    target; without one it falls back to the most recent items.
    """
    hist = sample.history
    if index is None or sample.target not in index:
        return hist[-sample.depth:]
    usable = [i for i in hist if i in index]
    if not usable:
        return []
    vecs = np.stack([index.vector(i) for i in usable])
    res = top_k_gsu(usable, vecs, index.vector(sample.target), sample.depth)
    return res.ids
