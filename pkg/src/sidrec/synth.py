"""Seeded synthetic fixtures: mixtures, long-tail catalogs, demo corpora."""
from __future__ import annotations

import numpy as np


def gaussian_mixture(n: int, d: int, components: int = 3, seed: int = 0,
                     spread: float = 4.0, noise: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=spread, size=(components, d))
    which = rng.integers(components, size=n)
    return centers[which] + rng.normal(scale=noise, size=(n, d))


def long_tail_catalog(n: int, d: int, clusters: int = 500, seed: int = 0,
                      spread: float = 3.0, noise: float = 0.5):
    """Points drawn from clusters whose masses fall off as ``rank ** -1``.

    Returns ``(points, cluster_of_point)``.
    """
    rng = np.random.default_rng(seed)
    mass = 1.0 / np.arange(1, clusters + 1)
    mass /= mass.sum()
    which = rng.choice(clusters, size=n, p=mass)
    centers = rng.normal(scale=spread, size=(clusters, d))
    # tail clusters are tighter in absolute terms but sit far apart
    return centers[which] + rng.normal(scale=noise, size=(n, d)), which


def planted_sid_examples(n: int, seed: int = 0, n_items: int = 100_000, k: int = 5,
                         vocab=(8, 8, 16), task: str = "ctr"):
    """ESU examples whose label is 1 iff some history item shares the target's c1.

    Items are drawn from a large catalog so item ids are mostly seen once;
    only the SID features carry signal that transfers to new items.
    """
    from .esu import TrainingExample

    rng = np.random.default_rng(seed)
    sids = np.stack([rng.integers(v, size=n_items) for v in vocab], axis=1)

    def entry(i):
        return int(i), tuple(int(c) for c in sids[i])

    out = []
    for _ in range(n):
        t = int(rng.integers(n_items))
        seq = rng.integers(n_items, size=k)
        y = int((sids[seq, 0] == sids[t, 0]).any())
        out.append(TrainingExample(entry(t), [entry(s) for s in seq], {task: y},
                                   user_id=int(rng.integers(n // 4 + 1))))
    return out


def demo_corpus(seed: int = 0, n_items: int = 1500, d: int = 16, clusters: int = 60,
                n_users: int = 120):
    """Small self-consistent fixture for the CLI pipeline.

    Returns a dict of in-memory records; :func:`sidrec.cli` writes them out.
    """
    from .gsu import Event, UserSequence

    rng = np.random.default_rng(seed)
    vecs, cluster = long_tail_catalog(n_items, d, clusters, seed, spread=2.0, noise=0.6)
    ids = np.arange(1, n_items + 1)
    members = {c: ids[cluster == c] for c in range(clusters)}
    populated = [c for c in range(clusters) if len(members[c])]
    sizes = np.array([len(members[c]) for c in populated], dtype=np.float64)

    sequences, examples, sessions = [], [], []
    for u in range(1, n_users + 1):
        liked = rng.choice(populated, size=2, replace=False, p=sizes / sizes.sum())
        length = int(rng.integers(25, 60))
        events, t = [], 0.0
        for _ in range(length):
            c = liked[rng.integers(2)] if rng.random() < 0.8 else populated[rng.integers(len(populated))]
            item = int(rng.choice(members[c]))
            t += float(rng.integers(1, 100))
            flags = ("click", "order") if rng.random() < 0.2 else ("click",)
            events.append(Event(item, t, flags))
        future = [int(rng.choice(members[liked[rng.integers(2)]])) for _ in range(5)]
        sequences.append(UserSequence(u, events, future))
        for s in range(0, length, 6):
            sessions.append(sorted({e.item_id for e in events[s:s + 6]}))
        history = [e.item_id for e in events]
        for j in range(4):
            positive = j % 2 == 0
            if positive:
                c = liked[rng.integers(2)]
            else:
                others = [c for c in populated if c not in liked]
                c = others[rng.integers(len(others))]
            target = int(rng.choice(members[c]))
            label = int(positive) if rng.random() > 0.05 else int(not positive)
            examples.append({"user_id": u, "target": target, "subsequence": history,
                             "labels": {"ctr": label}})

    meta = [{"item_id": int(i), "title": f"Item {int(i)}", "category": f"cat{int(cluster[i - 1])}",
             "attributes": {"brand": f"b{int(i) % 7}"}} for i in ids]

    ratings = []
    for u in range(1, 101):
        length = 15 if u % 10 == 0 else int(rng.integers(20, 40))
        t = 0
        for _ in range(length):
            t += int(rng.integers(1, 1000))
            ratings.append((u, int(rng.choice(ids)), int(rng.integers(1, 6)), t))

    split = int(0.8 * n_users)
    train = [e for e in examples if e["user_id"] <= split]
    test = [e for e in examples if e["user_id"] > split]
    return {"ids": ids, "vectors": vecs, "cluster": cluster, "sequences": sequences,
            "sessions": sessions, "meta": meta, "train": train, "test": test,
            "ratings": ratings}
