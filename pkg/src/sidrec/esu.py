"""Exact Search Unit ranker over ItemID + three-level SID features.

Forward pass per example::

    x      = concat(item, sid1, sid2, sid3 embeddings)       (per item)
    q      = x_target @ Wq ; k_j = x_j @ Wk ; v_j = x_j @ Wv
    a      = softmax(q . k_j / sqrt(h))   over the retrieved subsequence
    o      = sum_j a_j v_j                (learned null vector if empty)
    u      = concat(o, q, o * q, side)
    mix    = sum_e gate_e(u) * expert_e(u)   (two-layer ReLU experts)
    y_task = sigmoid(mix @ w_task + b_task)

Gradients are derived by hand; :func:`grad_check` compares them with central
finite differences.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .container import load_container, save_container

EPS = 1e-7
TABLES = ("emb_item", "emb_sid1", "emb_sid2", "emb_sid3")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingExample:
    target: tuple                       # (item_id, (c1, c2, c3))
    subsequence: list                   # [(item_id, (c1, c2, c3)), ...]
    labels: dict                        # task -> 0/1
    side: np.ndarray | None = None
    user_id: int = 0

    def __post_init__(self):
        for task, y in self.labels.items():
            if y not in (0, 1):
                raise ValueError(f"label {task}={y!r} is not binary")


@dataclass
class EsuConfig:
    vocab: tuple = (1000, 256, 256, 8192)   # item, sid1, sid2, sid3
    e: int = 8
    h: int = 8
    experts: int = 4
    expert_hidden: int = 16
    mix_dim: int = 8
    side_dim: int = 0
    tasks: tuple = ("ctr",)
    use_sid: bool = True
    init_scale: float = 0.1
    seed: int = 0

    @property
    def n_tables(self) -> int:
        return 4 if self.use_sid else 1

    @property
    def feat_dim(self) -> int:
        return self.n_tables * self.e

    @property
    def moe_in(self) -> int:
        return 3 * self.h + self.side_dim


class EsuModel:
    def __init__(self, config: EsuConfig, params: dict | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict:
        c = self.config
        rng = np.random.default_rng(c.seed)
        p = {}
        for name, size in list(zip(TABLES, c.vocab))[:c.n_tables]:
            p[name] = rng.normal(scale=c.init_scale, size=(size, c.e))
        F, U, H, M, E = c.feat_dim, c.moe_in, c.expert_hidden, c.mix_dim, c.experts
        for name in ("Wq", "Wk", "Wv"):
            p[name] = rng.normal(scale=1.0 / math.sqrt(F), size=(F, c.h))
        p["null"] = np.zeros(c.h)
        p["W1"] = rng.normal(scale=math.sqrt(2.0 / U), size=(E, U, H))
        p["b1"] = np.zeros((E, H))
        p["W2"] = rng.normal(scale=1.0 / math.sqrt(H), size=(E, H, M))
        p["b2"] = np.zeros((E, M))
        p["Wg"] = rng.normal(scale=0.1 / math.sqrt(U), size=(U, E))
        p["bg"] = np.zeros(E)
        p["Wt"] = rng.normal(scale=1.0 / math.sqrt(M), size=(M, len(c.tasks)))
        p["bt"] = np.zeros(len(c.tasks))
        return p

    def copy(self) -> "EsuModel":
        return EsuModel(self.config, {k: v.copy() for k, v in self.params.items()})


# --------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    target: np.ndarray      # (B, n_tables) int
    seq: np.ndarray         # (B, k, n_tables) int, padded
    mask: np.ndarray        # (B, k) bool
    side: np.ndarray        # (B, side_dim)
    labels: np.ndarray      # (B, T)
    users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _feature_ids(entry, n_tables):
    item, sid = entry
    ids = (int(item),) + tuple(int(c) for c in sid)
    return ids[:n_tables]


def make_batch(model: EsuModel, examples: Sequence[TrainingExample]) -> Batch:
    c = model.config
    B = len(examples)
    k = max([len(ex.subsequence) for ex in examples] + [1])
    nt = c.n_tables
    target = np.zeros((B, nt), dtype=np.int64)
    seq = np.zeros((B, k, nt), dtype=np.int64)
    mask = np.zeros((B, k), dtype=bool)
    side = np.zeros((B, c.side_dim))
    labels = np.zeros((B, len(c.tasks)))
    users = np.zeros(B, dtype=np.int64)
    for b, ex in enumerate(examples):
        if set(ex.labels) != set(c.tasks):
            raise ValueError(f"example tasks {sorted(ex.labels)} != model tasks {list(c.tasks)}")
        target[b] = _feature_ids(ex.target, nt)
        for j, entry in enumerate(ex.subsequence):
            seq[b, j] = _feature_ids(entry, nt)
            mask[b, j] = True
        if c.side_dim:
            if ex.side is None or np.shape(ex.side) != (c.side_dim,):
                raise ValueError(f"example needs a side vector of length {c.side_dim}")
            side[b] = ex.side
        labels[b] = [ex.labels[t] for t in c.tasks]
        users[b] = ex.user_id
    vocab = np.array(c.vocab[:nt])
    valid_seq = seq[mask]
    if (target < 0).any() or (target >= vocab).any() or \
            (valid_seq.size and ((valid_seq < 0).any() or (valid_seq >= vocab).any())):
        raise ValueError("feature id outside its embedding table vocabulary")
    return Batch(target, seq, mask, side, labels, users)


# --------------------------------------------------------------------------
# forward / backward

def _lookup(p, ids, n_tables):
    return np.concatenate([p[TABLES[t]][ids[..., t]] for t in range(n_tables)], axis=-1)


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def forward(model: EsuModel, batch: Batch):
    """Returns ``(probabilities (B, T), cache)``."""
    c, p = model.config, model.params
    nt = c.n_tables
    xt = _lookup(p, batch.target, nt)                 # (B, F)
    X = _lookup(p, batch.seq, nt)                     # (B, k, F)
    q = xt @ p["Wq"]
    K = X @ p["Wk"]
    V = X @ p["Wv"]
    scale = 1.0 / math.sqrt(c.h)
    logits = np.einsum("bkh,bh->bk", K, q) * scale
    has = batch.mask.any(axis=1)
    masked = np.where(batch.mask, logits, -np.inf)
    mx = np.where(has, masked.max(axis=1, initial=-np.inf), 0.0)
    ex = np.where(batch.mask, np.exp(masked - mx[:, None]), 0.0)
    den = ex.sum(axis=1)
    a = ex / np.where(den > 0, den, 1.0)[:, None]
    o = np.einsum("bk,bkh->bh", a, V)
    o = np.where(has[:, None], o, p["null"][None, :])
    u = np.concatenate([o, q, o * q, batch.side], axis=1)
    pre1 = np.einsum("bu,euh->beh", u, p["W1"]) + p["b1"][None]
    h1 = np.maximum(pre1, 0.0)
    z = np.einsum("beh,ehm->bem", h1, p["W2"]) + p["b2"][None]
    gl = u @ p["Wg"] + p["bg"]
    gl = gl - gl.max(axis=1, keepdims=True)
    g = np.exp(gl)
    g /= g.sum(axis=1, keepdims=True)
    mix = np.einsum("be,bem->bm", g, z)
    out_logit = mix @ p["Wt"] + p["bt"]
    prob = _sigmoid(out_logit)
    cache = dict(xt=xt, X=X, q=q, K=K, V=V, a=a, has=has, o=o, u=u, pre1=pre1, h1=h1,
                 z=z, g=g, mix=mix, prob=prob)
    return prob, cache


def bce_terms(prob, labels):
    pc = np.clip(prob, EPS, 1.0 - EPS)
    return -(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc))


def multitask_bce_loss(predictions: dict, labels: dict) -> float:
    """Summed binary cross-entropy over tasks with predictions clamped to [eps, 1-eps]."""
    if set(predictions) != set(labels):
        raise ValueError(f"prediction tasks {sorted(predictions)} != label tasks {sorted(labels)}")
    keys = sorted(predictions)
    p = np.array([predictions[t] for t in keys], dtype=np.float64)
    y = np.array([labels[t] for t in keys], dtype=np.float64)
    return float(bce_terms(p, y).sum())


def loss_and_grads(model: EsuModel, batch: Batch):
    """Mean (over examples) summed-task BCE and its gradient for every parameter."""
    c, p = model.config, model.params
    prob, cc = forward(model, batch)
    B = prob.shape[0]
    y = batch.labels
    loss = float(bce_terms(prob, y).sum() / B)
    inside = (prob > EPS) & (prob < 1.0 - EPS)
    dlogit = np.where(inside, prob - y, 0.0) / B

    gr = {}
    gr["Wt"] = cc["mix"].T @ dlogit
    gr["bt"] = dlogit.sum(axis=0)
    dmix = dlogit @ p["Wt"].T                                   # (B, M)
    g, z = cc["g"], cc["z"]
    dz = g[:, :, None] * dmix[:, None, :]                       # (B, E, M)
    dg = np.einsum("bem,bm->be", z, dmix)
    dgl = g * (dg - (g * dg).sum(axis=1, keepdims=True))
    u = cc["u"]
    gr["Wg"] = u.T @ dgl
    gr["bg"] = dgl.sum(axis=0)
    du = dgl @ p["Wg"].T
    gr["W2"] = np.einsum("beh,bem->ehm", cc["h1"], dz)
    gr["b2"] = dz.sum(axis=0)
    dh1 = np.einsum("bem,ehm->beh", dz, p["W2"])
    dpre1 = dh1 * (cc["pre1"] > 0)
    gr["W1"] = np.einsum("bu,beh->euh", u, dpre1)
    gr["b1"] = dpre1.sum(axis=0)
    du += np.einsum("beh,euh->bu", dpre1, p["W1"])

    h = c.h
    o, q = cc["o"], cc["q"]
    do = du[:, :h] + du[:, 2 * h:3 * h] * q
    dq = du[:, h:2 * h] + du[:, 2 * h:3 * h] * o
    has = cc["has"]
    gr["null"] = do[~has].sum(axis=0)
    do = np.where(has[:, None], do, 0.0)

    a, K, V = cc["a"], cc["K"], cc["V"]
    scale = 1.0 / math.sqrt(h)
    dV = a[:, :, None] * do[:, None, :]
    da = np.einsum("bkh,bh->bk", V, do)
    dlog = a * (da - (a * da).sum(axis=1, keepdims=True))
    dq += np.einsum("bk,bkh->bh", dlog, K) * scale
    dK = dlog[:, :, None] * q[:, None, :] * scale

    xt, X = cc["xt"], cc["X"]
    gr["Wq"] = xt.T @ dq
    gr["Wk"] = np.einsum("bkf,bkh->fh", X, dK)
    gr["Wv"] = np.einsum("bkf,bkh->fh", X, dV)
    dxt = dq @ p["Wq"].T
    dX = dK @ p["Wk"].T + dV @ p["Wv"].T

    e = c.e
    mask = batch.mask
    for t in range(c.n_tables):
        name = TABLES[t]
        gt = np.zeros_like(p[name])
        np.add.at(gt, batch.target[:, t], dxt[:, t * e:(t + 1) * e])
        np.add.at(gt, batch.seq[..., t][mask], dX[..., t * e:(t + 1) * e][mask])
        gr[name] = gt
    return loss, gr, prob, cc


def touched_rows(batch: Batch, t: int) -> np.ndarray:
    return np.unique(np.concatenate([batch.target[:, t], batch.seq[..., t][batch.mask]]))


def train_step(model: EsuModel, batch, lr: float):
    """One SGD step in place; returns ``(model, loss)``.

    Only embedding rows referenced by the batch are written.
    """
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    if not isinstance(batch, Batch):
        batch = make_batch(model, batch)
    loss, grads, prob, _ = loss_and_grads(model, batch)
    if not math.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss}; prob range [{np.min(prob):.3g}, {np.max(prob):.3g}], "
            f"max |param| {max(float(np.abs(v).max()) for v in model.params.values()):.3g}")
    if lr == 0:
        return model, loss
    p = model.params
    for name, gval in grads.items():
        if name in TABLES:
            rows = touched_rows(batch, TABLES.index(name))
            p[name][rows] -= lr * gval[rows]
        else:
            p[name] -= lr * gval
    return model, loss


def esu_forward(model: EsuModel, ex: TrainingExample) -> dict:
    prob, _ = forward(model, make_batch(model, [ex]))
    return {t: float(prob[0, i]) for i, t in enumerate(model.config.tasks)}


def attention_weights(model: EsuModel, ex: TrainingExample) -> np.ndarray:
    batch = make_batch(model, [ex])
    _, cc = forward(model, batch)
    return cc["a"][0, batch.mask[0]]


def predict(model: EsuModel, examples, batch_size: int = 512) -> np.ndarray:
    out = []
    for s in range(0, len(examples), batch_size):
        prob, _ = forward(model, make_batch(model, examples[s:s + batch_size]))
        out.append(prob)
    return np.concatenate(out) if out else np.zeros((0, len(model.config.tasks)))


def fit(model: EsuModel, examples, lr: float = 0.1, epochs: int = 10,
        batch_size: int = 64, seed: int = 0, callback=None) -> list:
    """Minibatch SGD over shuffled examples; returns per-epoch mean loss."""
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(len(examples))
        total, count = 0.0, 0
        for s in range(0, len(perm), batch_size):
            chunk = [examples[i] for i in perm[s:s + batch_size]]
            _, loss = train_step(model, make_batch(model, chunk), lr)
            total += loss * len(chunk)
            count += len(chunk)
        history.append(total / max(count, 1))
        if callback is not None:
            callback(epoch, history[-1])
    return history


def grad_check(model: EsuModel, ex, step: float = 1e-5, max_entries: int | None = None,
               seed: int = 0) -> float:
    """Worst per-group relative error between analytic and central-difference gradients.

    Relative error for a group is ``|g_a - g_n| / max(|g_a| + |g_n|, 1e-8)`` in
    the 2-norm. ``max_entries`` caps how many entries per group are probed.
    """
    examples = ex if isinstance(ex, (list, tuple)) else [ex]
    batch = make_batch(model, examples)
    _, grads, _, _ = loss_and_grads(model, batch)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in model.params.items():
        flat = arr.reshape(-1)
        if name in TABLES:
            rows = touched_rows(batch, TABLES.index(name))
            e = arr.shape[1]
            idx = (rows[:, None] * e + np.arange(e)[None, :]).reshape(-1)
        else:
            idx = np.arange(flat.size)
        if max_entries is not None and idx.size > max_entries:
            idx = np.sort(rng.choice(idx, max_entries, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            lp = loss_and_grads(model, batch)[0]
            flat[i] = old - step
            lm = loss_and_grads(model, batch)[0]
            flat[i] = old
            num[j] = (lp - lm) / (2 * step)
        ana = grads[name].reshape(-1)[idx]
        err = np.linalg.norm(ana - num) / max(np.linalg.norm(ana) + np.linalg.norm(num), 1e-8)
        worst = max(worst, float(err))
    return worst


# --------------------------------------------------------------------------
# persistence

def save_model(model: EsuModel, path) -> None:
    cfg = asdict(model.config)
    cfg["vocab"] = list(cfg["vocab"])
    cfg["tasks"] = list(cfg["tasks"])
    save_container(path, "esu", model.params, {"config": cfg})


def load_model(path) -> EsuModel:
    _, arrays, meta = load_container(path, "esu")
    cfg = dict(meta["config"])
    cfg["vocab"] = tuple(cfg["vocab"])
    cfg["tasks"] = tuple(cfg["tasks"])
    return EsuModel(EsuConfig(**cfg), arrays)
