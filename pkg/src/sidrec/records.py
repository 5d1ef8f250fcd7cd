"""Line-delimited JSON record formats shared by the CLI stages.

sids.jsonl          {"item_id": 7, "sid": [c1, c2, c3]}
sequences.jsonl     {"user_id": 1, "events": [[item, ts, ["click"]], ...], "future": [item, ...]}
sessions.jsonl      {"user_id": 1, "items": [item, ...]}
examples.jsonl      {"user_id": 1, "target": {"item_id": 7, "sid": [..]} | 7,
                     "subsequence": [{"item_id": 3, "sid": [..]} | 3, ...],
                     "labels": {"ctr": 1}, "side": [..]}

``sid`` may be omitted in example files; it is then filled from a SID table.
"""
from __future__ import annotations

import json

import numpy as np

from .esu import TrainingExample
from .gsu import Event, UserSequence


def _lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line:
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_sids(path, ids, codes) -> None:
    write_jsonl(path, ({"item_id": int(i), "sid": [int(c) for c in code]}
                       for i, code in zip(ids, codes)))


def read_sids(path) -> dict:
    return {int(r["item_id"]): tuple(int(c) for c in r["sid"]) for r in _lines(path)}


def read_sequences(path) -> list:
    out = []
    for r in _lines(path):
        events = [Event(int(e[0]), float(e[1]), tuple(e[2]) if len(e) > 2 else ())
                  for e in r["events"]]
        out.append(UserSequence(int(r["user_id"]), events,
                                [int(i) for i in r.get("future", [])]))
    return out


def write_sequences(path, sequences) -> None:
    write_jsonl(path, ({"user_id": s.user_id,
                        "events": [[e.item_id, e.timestamp, list(e.flags)] for e in s.events],
                        "future": list(s.future)} for s in sequences))


def read_sessions(path) -> list:
    return [list(r["items"]) for r in _lines(path)]


def _entry(raw, sids):
    if isinstance(raw, dict):
        item = int(raw["item_id"])
        sid = raw.get("sid")
    else:
        item, sid = int(raw), None
    if sid is None:
        if sids is None or item not in sids:
            raise KeyError(f"no SID known for item {item}")
        sid = sids[item]
    return item, tuple(int(c) for c in sid)


def example_from_record(r: dict, sids: dict | None = None) -> TrainingExample:
    side = r.get("side")
    return TrainingExample(
        target=_entry(r["target"], sids),
        subsequence=[_entry(x, sids) for x in r.get("subsequence", [])],
        labels={k: int(v) for k, v in r["labels"].items()},
        side=None if side is None else np.asarray(side, dtype=np.float64),
        user_id=int(r.get("user_id", 0)))


def read_example_records(path) -> list:
    return list(_lines(path))


def example_to_record(ex: TrainingExample) -> dict:
    rec = {"user_id": ex.user_id,
           "target": {"item_id": ex.target[0], "sid": list(ex.target[1])},
           "subsequence": [{"item_id": i, "sid": list(s)} for i, s in ex.subsequence],
           "labels": dict(ex.labels)}
    if ex.side is not None:
        rec["side"] = [float(v) for v in ex.side]
    return rec
