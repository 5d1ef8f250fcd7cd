"""Item-pair export, LLM-judge prompts, verdict parsing and filtering.

The judge is any callable taking a request ``{"pair_id", "prompt"}`` and
returning ``{"pair_id", "text"}``; :class:`HttpJudge` speaks that format as
JSON over HTTP and :class:`MockJudge` is the deterministic in-process stand-in.
"""
from __future__ import annotations

import json
import logging
import re
import time
import urllib.error
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

I2I = "I2I"
U2I = "U2I"
ACCEPT = "Accept"
REJECT = "Reject"


@dataclass
class ItemMeta:
    item_id: int
    title: str
    attributes: dict = field(default_factory=dict)
    category: str = ""
    ocr: str | None = None
    asr: str | None = None
    image_caption: str | None = None

    def __post_init__(self):
        if not str(self.title).strip():
            raise ValueError(f"item {self.item_id}: title must be non-empty")


@dataclass(frozen=True)
class ItemPair:
    trigger: int
    target: int
    source: str
    score: float

    def __post_init__(self):
        if self.trigger == self.target:
            raise ValueError(f"pair trigger and target are both {self.trigger}")
        if self.source not in (I2I, U2I):
            raise ValueError(f"unknown pair source {self.source!r}")

    @property
    def pair_id(self) -> str:
        return f"{self.source}:{self.trigger}:{self.target}"


@dataclass
class JudgeVerdict:
    pair: ItemPair
    decision: str
    raw_response: str


@dataclass
class QaPair:
    item_id: int
    question: str
    answer: str


class JudgeParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class JudgeTransportError(RuntimeError):
    """Recoverable failure talking to the judge; retried."""


class PipelineError(RuntimeError):
    pass


class QaParseError(ValueError):
    pass


# --------------------------------------------------------------------------
# pair export

def cooccurrence_scores(sessions) -> Counter:
    """Number of sessions in which each unordered item pair co-occurs."""
    counts = Counter()
    for sess in sessions:
        for a, b in combinations(sorted(set(sess)), 2):
            counts[(a, b)] += 1
    return counts


def export_i2i_pairs(sessions, min_score: float = 1, top_n: int = 10,
                     scorer: Callable = cooccurrence_scores) -> list:
    """Directed (trigger, target) pairs from co-interaction statistics.

    Each trigger keeps its ``top_n`` best partners scoring at least
    ``min_score``. Output is ordered by score, then trigger, then target.
    """
    sessions = list(sessions)
    if not sessions:
        raise ValueError("export_i2i_pairs needs at least one session")
    partners: dict = {}
    for (a, b), s in scorer(sessions).items():
        if s < min_score or a == b:
            continue
        partners.setdefault(a, []).append((b, s))
        partners.setdefault(b, []).append((a, s))
    pairs = []
    for trig, cands in partners.items():
        cands.sort(key=lambda bs: (-bs[1], bs[0]))
        pairs.extend(ItemPair(trig, tgt, I2I, float(s)) for tgt, s in cands[:top_n])
    pairs.sort(key=lambda p: (-p.score, p.trigger, p.target))
    return pairs


@dataclass
class U2IExport:
    pairs: list
    missing_embedding: int


def export_u2i_pairs(user_positives: dict, embeddings: dict, window: int = 50) -> U2IExport:
    """Pair each positive with its most similar item among the user's previous
    ``window`` positives (inner product; the more recent item wins ties)."""
    pairs, missing = [], 0
    for user in sorted(user_positives):
        items = list(user_positives[user])
        for pos, trig in enumerate(items):
            recent = [i for i in items[max(0, pos - window):pos] if i != trig]
            if not recent:
                continue
            if trig not in embeddings:
                missing += 1
                continue
            tv = np.asarray(embeddings[trig], dtype=np.float64)
            best, best_score = None, -np.inf
            for cand in reversed(recent):
                if cand not in embeddings:
                    missing += 1
                    continue
                s = float(np.dot(tv, embeddings[cand]))
                if s > best_score:
                    best, best_score = cand, s
            if best is not None:
                pairs.append(ItemPair(trig, best, U2I, best_score))
    return U2IExport(pairs, missing)


# --------------------------------------------------------------------------
# prompts

_FILTER_TEMPLATE = (
    "Item-1 information: #Title: {t1}, #Attributions: {a1};\n"
    "Item-2 information: #Title: {t2}, #Attribution: {a2};\n"
    "Please analyze the potential correlation between two Items, such as semantic "
    "correlation (e.g., similar concepts or uses), complementary purchasing relationships "
    "(often purchased simultaneously or used together). Examples: \n"
    "(1) (Fishing rod, parasol): Highly related usage scenarios; \n"
    "(2) (Fishing rod, outdoor jacket): Shared outdoor activity scenario; \n"
    "If the product pair correlation is strong, reply: `<answer>Yes</answer>`. "
    "Otherwise, reply: `<answer>No</answer>`."
)

_QA_TEMPLATE = (
    "Item information: #Title: {title} #Attributes: {attrs} #Images: {images}, "
    "#OCR: {ocr}, #ASR: {asr};\n"
    "Please generate ten instruction questions as diverse as possible. These questions are "
    "about facts or an understanding and evaluation of relevant content. Do not ask any "
    "questions that cannot be answered confidently. \n"
    "You need to return the result in the following form:\n"
    '1. {{"Question":..., "Answer":...}}\n'
    '2. {{"Question":..., "Answer":...}}'
)

_ESCAPES = str.maketrans({"<": "&lt;", ">": "&gt;", "`": "'", "#": "＃",
                          "\n": " ", "\r": " ", ";": ","})


def escape_field(text) -> str:
    """Neutralise characters that could forge template structure."""
    return str(text).translate(_ESCAPES).strip()


def _render_attrs(meta: ItemMeta) -> str:
    parts = []
    if meta.category:
        parts.append(f"category: {escape_field(meta.category)}")
    for key in sorted(meta.attributes):
        parts.append(f"{escape_field(key)}: {escape_field(meta.attributes[key])}")
    return ", ".join(parts) if parts else "none"


def render_filter_prompt(a: ItemMeta, b: ItemMeta) -> str:
    # str.format only interprets the template; substituted values are inert
    return _FILTER_TEMPLATE.format(t1=escape_field(a.title), a1=_render_attrs(a),
                                   t2=escape_field(b.title), a2=_render_attrs(b))


def render_qa_prompt(meta: ItemMeta) -> str:
    def opt(v):
        return escape_field(v) if v else "none"
    return _QA_TEMPLATE.format(title=escape_field(meta.title), attrs=_render_attrs(meta),
                               images=opt(meta.image_caption), ocr=opt(meta.ocr),
                               asr=opt(meta.asr))


# --------------------------------------------------------------------------
# parsing

_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.IGNORECASE | re.DOTALL)


def parse_judge_answer(response: str) -> str:
    m = _ANSWER_RE.search(response or "")
    if m is None:
        raise JudgeParseError("no <answer>...</answer> tag in judge response", response)
    word = m.group(1).strip().lower()
    if word == "yes":
        return ACCEPT
    if word == "no":
        return REJECT
    raise JudgeParseError(f"answer tag holds {m.group(1)!r}, expected Yes or No", response)


_NUMBER_RE = re.compile(r"\s*\d+\s*[.)]\s*")


@dataclass
class QaParseResult:
    pairs: list
    skipped: int


def parse_qa_output(response: str, item_id: int = 0) -> QaParseResult:
    """Extract ``{"Question": ..., "Answer": ...}`` objects, numbered or not."""
    decoder = json.JSONDecoder()
    pairs, skipped = [], 0
    for line in (response or "").splitlines():
        pos = 0
        while pos < len(line):
            m = _NUMBER_RE.match(line, pos)
            if m:
                pos = m.end()
            while pos < len(line) and line[pos].isspace():
                pos += 1
            if pos >= len(line):
                break
            try:
                obj, end = decoder.raw_decode(line, pos)
                q, a = str(obj["Question"]).strip(), str(obj["Answer"]).strip()
                if not q or not a:
                    raise ValueError("empty question or answer")
            except (ValueError, KeyError, TypeError):
                skipped += 1
                break
            pairs.append(QaPair(item_id, q, a))
            pos = end
    if not pairs:
        raise QaParseError(f"no question/answer pairs found ({skipped} malformed lines)")
    return QaParseResult(pairs, skipped)


# --------------------------------------------------------------------------
# judges

class MockJudge:
    """Deterministic judge answering from a rule over the prompt text."""

    def __init__(self, rule: Callable[[str], str]):
        self.rule = rule
        self.calls = 0

    def __call__(self, request: dict) -> dict:
        self.calls += 1
        return {"pair_id": request["pair_id"], "text": self.rule(request["prompt"])}


# titles cannot contain "#", so this only matches the rendered attribute field
_CATEGORY_RE = re.compile(r"#Attributions?: category: ([^,;]*)")


def category_match_rule(prompt: str) -> str:
    """Accept when both items in a filter prompt carry the same category."""
    cats = _CATEGORY_RE.findall(prompt)
    same = len(cats) >= 2 and cats[0].strip() == cats[1].strip()
    verdict = "Yes" if same else "No"
    return f"Both items compared by category. <answer>{verdict}</answer>"


def accept_all_rule(prompt: str) -> str:
    return "<answer>Yes</answer>"


class HttpJudge:
    """POSTs the JSON request to ``url`` and expects the JSON response back."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def __call__(self, request: dict) -> dict:
        body = json.dumps(request).encode()
        req = urllib.request.Request(self.url, data=body,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            raise JudgeTransportError(f"judge at {self.url} failed: {exc}") from exc
        if payload.get("pair_id") != request["pair_id"] or "text" not in payload:
            raise JudgeTransportError(f"judge at {self.url} returned a mismatched response")
        return payload


@dataclass
class FilterPolicy:
    max_retries: int = 3
    backoff: float = 0.0
    max_in_flight: int = 4


@dataclass
class FilterResult:
    accepted: list
    rejected: list
    quarantined: list       # verdicts with decision None
    stats: dict


def _judge_one(pair, prompt, judge, policy):
    request = {"pair_id": pair.pair_id, "prompt": prompt}
    last = None
    for attempt in range(policy.max_retries + 1):
        try:
            return judge(request)["text"]
        except JudgeTransportError as exc:
            last = exc
            log.warning("judge call for %s failed (attempt %d): %s", pair.pair_id, attempt + 1, exc)
            if policy.backoff:
                time.sleep(policy.backoff * (2 ** attempt))
    raise PipelineError(f"judge unavailable for {pair.pair_id} after "
                        f"{policy.max_retries + 1} attempts: {last}")


def filter_pairs(pairs, meta: dict, judge, policy: FilterPolicy | None = None) -> FilterResult:
    """Judge every pair once and split into accepted / rejected / quarantined.

    ``judge`` is a single judge or a ``{source: judge}`` mapping. Responses
    that do not parse are quarantined, never accepted.
    """
    policy = policy or FilterPolicy()
    pairs = list(pairs)
    judges = judge if isinstance(judge, dict) else {I2I: judge, U2I: judge}

    def run(pair):
        prompt = render_filter_prompt(meta[pair.trigger], meta[pair.target])
        return _judge_one(pair, prompt, judges[pair.source], policy)

    workers = max(1, int(policy.max_in_flight))
    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            texts = list(pool.map(run, pairs))
    else:
        texts = [run(p) for p in pairs]

    accepted, rejected, quarantined = [], [], []
    stats = {src: {"total": 0, "accepted": 0, "rejected": 0, "parse_errors": 0}
             for src in (I2I, U2I)}
    for pair, text in zip(pairs, texts):
        st = stats[pair.source]
        st["total"] += 1
        try:
            decision = parse_judge_answer(text)
        except JudgeParseError:
            st["parse_errors"] += 1
            quarantined.append(JudgeVerdict(pair, None, text))
            continue
        verdict = JudgeVerdict(pair, decision, text)
        if decision == ACCEPT:
            st["accepted"] += 1
            accepted.append(verdict)
        else:
            st["rejected"] += 1
            rejected.append(verdict)
    for st in stats.values():
        judged = st["accepted"] + st["rejected"]
        st["rejection_rate"] = 100.0 * st["rejected"] / judged if judged else 0.0
    return FilterResult(accepted, rejected, quarantined, stats)


# --------------------------------------------------------------------------
# line-delimited persistence

def pair_to_json(p: ItemPair) -> str:
    return json.dumps(asdict(p), sort_keys=True)


def pair_from_json(line: str) -> ItemPair:
    d = json.loads(line)
    return ItemPair(int(d["trigger"]), int(d["target"]), d["source"], float(d["score"]))


def verdict_to_json(v: JudgeVerdict) -> str:
    return json.dumps({"pair": asdict(v.pair), "decision": v.decision,
                       "raw_response": v.raw_response}, sort_keys=True)


def read_pairs(path) -> list:
    with open(path) as fh:
        return [pair_from_json(line) for line in fh if line.strip()]


def write_lines(path, lines) -> None:
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")


def meta_from_json(line: str) -> ItemMeta:
    d = json.loads(line)
    return ItemMeta(int(d["item_id"]), d["title"], d.get("attributes", {}),
                    d.get("category", ""), d.get("ocr"), d.get("asr"), d.get("image_caption"))


def read_meta(path) -> dict:
    with open(path) as fh:
        metas = [meta_from_json(line) for line in fh if line.strip()]
    return {m.item_id: m for m in metas}
