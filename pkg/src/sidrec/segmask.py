"""Three-segment attention masks (input | compression | QA) and toy losses.

Row i of a mask lists the key positions token i may attend to:

* input tokens: causal within the input segment
* compression tokens: every input token plus themselves
* QA tokens: every input and compression token, causal within QA

Annealing adds ``log(alpha)`` to the QA -> input block so the QA segment is
gradually forced to read the input through the compression tokens only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_TEMPERATURE = 0.05


@dataclass(frozen=True)
class SegmentLayout:
    n_in: int
    n_emb: int
    n_qa: int

    def __post_init__(self):
        if min(self.n_in, self.n_emb, self.n_qa) < 0:
            raise ValueError(f"segment lengths must be >= 0: {self}")

    @property
    def n(self) -> int:
        return self.n_in + self.n_emb + self.n_qa

    @property
    def input_slice(self) -> slice:
        return slice(0, self.n_in)

    @property
    def emb_slice(self) -> slice:
        return slice(self.n_in, self.n_in + self.n_emb)

    @property
    def qa_slice(self) -> slice:
        return slice(self.n_in + self.n_emb, self.n)


@dataclass(frozen=True, eq=False)
class AttentionMask:
    allow: np.ndarray   # (n, n) bool
    bias: np.ndarray    # (n, n) float, -inf where disallowed

    def to_text(self, show_bias: bool = False) -> str:
        """Text grid for fixtures: ``1``/``0`` per entry, or bias values."""
        rows = []
        for i in range(self.allow.shape[0]):
            if show_bias:
                rows.append(" ".join("-inf" if not a else f"{b:.6f}"
                                     for a, b in zip(self.allow[i], self.bias[i])))
            else:
                rows.append("".join("1" if a else "0" for a in self.allow[i]))
        return "\n".join(rows)


def _mask_from_allow(allow: np.ndarray) -> AttentionMask:
    bias = np.where(allow, 0.0, -np.inf)
    return AttentionMask(allow, bias)


def build_segment_mask(layout: SegmentLayout) -> AttentionMask:
    n = layout.n
    if n < 1:
        raise ValueError("layout must contain at least one token")
    allow = np.zeros((n, n), dtype=bool)
    a, b = layout.n_in, layout.n_in + layout.n_emb
    causal = np.tril(np.ones((n, n), dtype=bool))
    allow[:a, :a] = causal[:a, :a]
    allow[a:b, :a] = True
    allow[a:b, a:b] = np.eye(b - a, dtype=bool)
    allow[b:, :b] = True
    allow[b:, b:] = causal[b:, b:]
    return _mask_from_allow(allow)


@dataclass(frozen=True)
class AnnealSchedule:
    total_steps: int
    shape: str = "linear"

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.shape not in ("linear", "cosine"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")

    def alpha(self, step: int) -> float:
        frac = min(max(step / self.total_steps, 0.0), 1.0)
        if self.shape == "linear":
            return 1.0 - frac
        return 0.5 * (1.0 + math.cos(math.pi * frac)) if frac < 1.0 else 0.0


def anneal_input_bias(mask: AttentionMask, layout: SegmentLayout, step: int,
                      schedule: AnnealSchedule) -> AttentionMask:
    if step > schedule.total_steps:
        raise ValueError(f"step {step} beyond schedule end {schedule.total_steps}")
    alpha = schedule.alpha(step)
    allow = mask.allow.copy()
    bias = mask.bias.copy()
    rows, cols = layout.qa_slice, layout.input_slice
    if alpha <= 0.0:
        allow[rows, cols] = False
        bias[rows, cols] = -np.inf
    else:
        bias[rows, cols] = np.where(allow[rows, cols], math.log(alpha), -np.inf)
    return AttentionMask(allow, bias)


# --------------------------------------------------------------------------
# toy single-layer model

@dataclass
class ToyParams:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray

    @classmethod
    def random(cls, e: int, seed: int = 0, scale: float | None = None) -> "ToyParams":
        rng = np.random.default_rng(seed)
        s = scale if scale is not None else 1.0 / math.sqrt(e)
        return cls(*(rng.normal(scale=s, size=(e, e)) for _ in range(4)))


def masked_softmax(scores: np.ndarray, bias: np.ndarray) -> np.ndarray:
    z = scores + bias
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def toy_forward(params: ToyParams, tokens, mask: AttentionMask) -> np.ndarray:
    """One masked scaled dot-product attention layer with a residual path."""
    x = np.asarray(tokens, dtype=np.float64)
    n = mask.allow.shape[0]
    if x.ndim != 2 or x.shape[0] != n:
        raise ValueError(f"tokens shape {x.shape} does not match a {n}x{n} mask")
    e = x.shape[1]
    for name in ("Wq", "Wk", "Wv", "Wo"):
        if getattr(params, name).shape != (e, e):
            raise ValueError(f"{name} must be ({e}, {e})")
    q, k, v = x @ params.Wq, x @ params.Wk, x @ params.Wv
    w = masked_softmax(q @ k.T / math.sqrt(e), mask.bias)
    return x + (w @ v) @ params.Wo


def pooled_emb_vector(outputs, layout: SegmentLayout) -> np.ndarray:
    if layout.n_emb < 1:
        raise ValueError("pooling needs at least one compression token")
    return np.asarray(outputs, dtype=np.float64)[layout.emb_slice].mean(axis=0)


# --------------------------------------------------------------------------
# losses

def info_nce_loss(left, right, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Symmetric in-batch InfoNCE over cosine similarities.

    Row i of ``left`` and ``right`` form the positive pair; every other row in
    the batch is a negative.
    """
    a = np.atleast_2d(np.asarray(left, dtype=np.float64))
    b = np.atleast_2d(np.asarray(right, dtype=np.float64))
    if a.shape != b.shape or a.shape[0] < 1:
        raise ValueError(f"paired embeddings must share a non-empty shape: {a.shape} vs {b.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise FloatingPointError("zero-norm embedding in contrastive batch")
    s = (a / na[:, None]) @ (b / nb[:, None]).T / temperature

    def ce(m):
        m = m - m.max(axis=1, keepdims=True)
        logz = np.log(np.exp(m).sum(axis=1))
        return float(np.mean(logz - np.diag(m)))

    return 0.5 * (ce(s) + ce(s.T))


def ntp_cross_entropy(logits, targets) -> float:
    """Mean next-token cross-entropy; ``logits`` (n, V), ``targets`` (n,)."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    z = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(logz - z[np.arange(len(t)), t]))


def joint_loss(ntp_ce: float, contrastive: float, lam: float = 1.0) -> float:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return float(ntp_ce) + lam * float(contrastive)
