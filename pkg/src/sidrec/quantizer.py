"""Residual K-means + last-layer FSQ semantic-ID quantizer.

Levels one and two are K-means codebooks trained on successive residuals;
the third level projects the remaining residual, squashes each coordinate
through a sigmoid and rounds it onto a fixed integer grid ``{0..L}``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .container import load_container, save_container
from .embedstore import EmbeddingMatrix

log = logging.getLogger(__name__)

DEFAULT_K = 8192
DEFAULT_FSQ_DIMS = 13
DEFAULT_FSQ_LEVEL = 1

_CHUNK_ELEMS = 1 << 22


class SemanticId(NamedTuple):
    c1: int
    c2: int
    c3: int


@dataclass(frozen=True, eq=False)
class KmeansCodebook:
    centroids: np.ndarray                 # (K, d) float64
    inertia_history: tuple = ()
    n_iter: int = 0
    converged: bool = False

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError(f"centroids must be a non-empty (K, d) matrix, got {c.shape}")
        if not np.isfinite(c).all():
            raise ValueError("centroids must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


# --------------------------------------------------------------------------
# nearest-centroid search

def _assign_chunk(x, c, c_sq):
    # expansion trick for speed, then an exact re-check of near-tied rows so
    # the result is the exact argmin with lowest-index tie-breaking
    approx = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + c_sq[None, :]
    best = approx.min(axis=1)
    tol = 1e-9 * ((x * x).sum(1) + c_sq.max()) + 1e-300
    near = approx <= (best + tol)[:, None]
    labels = np.argmax(near, axis=1)
    multi = np.flatnonzero(near.sum(axis=1) > 1)
    for i in multi:
        cand = np.flatnonzero(near[i])
        exact = ((c[cand] - x[i]) ** 2).sum(axis=1)
        labels[i] = cand[np.argmin(exact)]
    dist = ((x - c[labels]) ** 2).sum(axis=1)
    return labels, dist


def assign_nearest(x: np.ndarray, centroids: np.ndarray, threads: int = 1):
    """Nearest centroid (squared Euclidean, lowest index on ties) for every row.

    Returns ``(labels, squared_distances)``. Chunks are independent, so the
    result does not depend on ``threads``.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ValueError(f"dimension mismatch: data {x.shape} vs centroids {c.shape}")
    c_sq = (c * c).sum(1)
    rows = max(1, _CHUNK_ELEMS // max(1, c.shape[0] * 4))
    bounds = [(s, min(s + rows, x.shape[0])) for s in range(0, x.shape[0], rows)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda b: _assign_chunk(x[b[0]:b[1]], c, c_sq), bounds))
    else:
        parts = [_assign_chunk(x[a:b], c, c_sq) for a, b in bounds]
    if not parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return (np.concatenate([p[0] for p in parts]).astype(np.int64),
            np.concatenate([p[1] for p in parts]))


def nearest_rep(x, cb: KmeansCodebook):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != cb.d:
        raise ValueError(f"vector dimension {x.shape[0]} != codebook dimension {cb.d}")
    labels, _ = assign_nearest(x[None, :], cb.centroids)
    idx = int(labels[0])
    return idx, cb.centroids[idx].copy()


# --------------------------------------------------------------------------
# K-means

def _as_data(data) -> np.ndarray:
    if isinstance(data, EmbeddingMatrix):
        x = data.as_float64()
    else:
        x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("k-means needs a non-empty 2-D data matrix")
    if not np.isfinite(x).all():
        raise ValueError("data contains NaN or infinite values")
    return x


def kmeans_pp_init(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            # fewer distinct points than K; duplicates are allowed
            idx = int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return x[chosen].copy()


def _cluster_means(x, labels, K, old):
    order = np.argsort(labels, kind="stable")
    sl = labels[order]
    starts = np.flatnonzero(np.r_[True, sl[1:] != sl[:-1]])
    present = sl[starts]
    counts = np.diff(np.r_[starts, len(sl)])
    sums = np.add.reduceat(x[order], starts, axis=0)
    new = old.copy()
    new[present] = sums / counts[:, None]
    empty = np.setdiff1d(np.arange(K), present)
    return new, empty


def kmeans_fit(data, K: int, max_iters: int = 100, seed: int = 0,
               threads: int = 1) -> KmeansCodebook:
    """Lloyd iterations from a seeded k-means++ start.

    Empty clusters are re-seeded with the points farthest from their current
    centroid. Iteration stops once assignments no longer change.
    """
    x = _as_data(data)
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if K > x.shape[0]:
        raise ValueError(f"K={K} exceeds the number of points n={x.shape[0]}")
    rng = np.random.default_rng(seed)
    c = kmeans_pp_init(x, K, rng)
    labels, dist = assign_nearest(x, c, threads)
    history = [float(dist.mean())]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        c, empty = _cluster_means(x, labels, K, c)
        if len(empty):
            far = np.argsort(-dist, kind="stable")[:len(empty)]
            c[empty] = x[far]
        new_labels, dist = assign_nearest(x, c, threads)
        history.append(float(dist.mean()))
        if not len(empty) and np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
    log.debug("kmeans K=%d n=%d iters=%d inertia=%.6g", K, x.shape[0], it, history[-1])
    return KmeansCodebook(c, tuple(history), it, converged)


# --------------------------------------------------------------------------
# FSQ

def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def round_half_away(u):
    u = np.asarray(u, dtype=np.float64)
    a = np.abs(u)
    fl = np.floor(a)
    r = np.where(a - fl >= 0.5, fl + 1.0, fl)
    return np.copysign(r, u)


@dataclass(frozen=True, eq=False)
class FsqQuantizer:
    W: np.ndarray       # (d, n_fsq) encoder projection
    W_out: np.ndarray   # (n_fsq, d) decoder
    L: int
    loss_history: tuple = ()

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        W_out = np.asarray(self.W_out, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] < 1:
            raise ValueError("W must be (d, n_fsq) with n_fsq >= 1")
        if W_out.shape != (W.shape[1], W.shape[0]):
            raise ValueError(f"W_out shape {W_out.shape} does not match W {W.shape}")
        if int(self.L) < 1:
            raise ValueError("L must be >= 1")
        if (int(self.L) + 1) ** W.shape[1] > 2 ** 64:
            raise ValueError("packed FSQ code does not fit in 64 bits")
        W.setflags(write=False)
        W_out.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "W_out", W_out)
        object.__setattr__(self, "L", int(self.L))

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def n_fsq(self) -> int:
        return self.W.shape[1]

    @property
    def radix(self) -> int:
        return self.L + 1

    @property
    def code_space(self) -> int:
        return self.radix ** self.n_fsq

    def digits(self, r: np.ndarray) -> np.ndarray:
        """Integer grid digits for a batch of residuals, shape (n, n_fsq)."""
        r = np.atleast_2d(np.asarray(r, dtype=np.float64))
        if r.shape[1] != self.d:
            raise ValueError(f"residual dimension {r.shape[1]} != FSQ input dimension {self.d}")
        return round_half_away(self.L * sigmoid(r @ self.W)).astype(np.int64)

    def pack(self, digits: np.ndarray) -> np.ndarray:
        digits = np.atleast_2d(digits)
        weights = np.array([self.radix ** i for i in range(self.n_fsq)], dtype=np.uint64)
        return (digits.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)

    def unpack(self, code: int) -> np.ndarray:
        code = int(code)
        if not 0 <= code < self.code_space:
            raise ValueError(f"FSQ code {code} outside [0, {self.code_space})")
        out = np.empty(self.n_fsq, dtype=np.int64)
        for i in range(self.n_fsq):
            code, out[i] = divmod(code, self.radix)
        return out

    def grid(self, digits) -> np.ndarray:
        return 2.0 * np.asarray(digits, dtype=np.float64) / self.L - 1.0

    def decode(self, digits) -> np.ndarray:
        return self.grid(digits) @ self.W_out


def fsq_encode(q: FsqQuantizer, residual):
    """Return ``(digits, packed)`` for one residual vector."""
    digits = q.digits(np.asarray(residual, dtype=np.float64).reshape(1, -1))[0]
    return digits, int(q.pack(digits)[0])


def _fit_decoder(g, r):
    sol, *_ = np.linalg.lstsq(g, r, rcond=None)
    return sol


def fsq_train(residuals, n_fsq: int = DEFAULT_FSQ_DIMS, L: int = DEFAULT_FSQ_LEVEL,
              seed: int = 0, epochs: int = 10, lr: float = 0.1,
              batch_size: int = 256) -> FsqQuantizer:
    """Fit the FSQ projection and decoder on residuals.

    Minimises mean squared reconstruction error with a straight-through
    estimator through the rounding, using plain minibatch SGD. The decoder is
    initialised and finally refit by least squares on the current codes.
    """
    r = np.asarray(residuals, dtype=np.float64)
    n, d = r.shape
    rng = np.random.default_rng(seed)
    scale = float(r.std()) or 1.0
    W = rng.standard_normal((d, n_fsq)) / (scale * math.sqrt(d))

    def codes(W_):
        s = sigmoid(r @ W_)
        return 2.0 * round_half_away(L * s) / L - 1.0

    W_out = _fit_decoder(codes(W), r)
    history = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            xb = r[perm[start:start + batch_size]]
            s = sigmoid(xb @ W)
            g = 2.0 * round_half_away(L * s) / L - 1.0
            diff = g @ W_out - xb
            total += float((diff ** 2).sum())
            dx = 2.0 * diff / diff.size
            dW_out = g.T @ dx
            dg = dx @ W_out.T
            # straight-through: d round(u)/du := 1, so dg/dproj = 2 s (1 - s)
            dproj = dg * 2.0 * s * (1.0 - s)
            dW = xb.T @ dproj
            W = W - lr * dW / scale ** 2
            W_out = W_out - lr * dW_out
        history.append(total / r.size)
    W_out = _fit_decoder(codes(W), r)
    return FsqQuantizer(W, W_out, L, tuple(history))


# --------------------------------------------------------------------------
# hybrid model

@dataclass(frozen=True, eq=False)
class ResKmeansFsqModel:
    level1: KmeansCodebook
    level2: KmeansCodebook
    fsq: FsqQuantizer
    training_report: tuple = ()

    def __post_init__(self):
        if not (self.level1.d == self.level2.d == self.fsq.d):
            raise ValueError("level1, level2 and FSQ input dimensions disagree")

    @property
    def d(self) -> int:
        return self.level1.d

    @property
    def vocab_sizes(self) -> tuple:
        return (self.level1.K, self.level2.K, self.fsq.code_space)

    def encode(self, x, threads: int = 1):
        """Codes ``(n, 3)`` plus the three stage residuals for a batch."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d:
            raise ValueError(f"input dimension {x.shape[1]} != model dimension {self.d}")
        l1, _ = assign_nearest(x, self.level1.centroids, threads)
        r1 = x - self.level1.centroids[l1]
        l2, _ = assign_nearest(r1, self.level2.centroids, threads)
        r2 = r1 - self.level2.centroids[l2]
        digits = self.fsq.digits(r2)
        c3 = self.fsq.pack(digits)
        r3 = r2 - self.fsq.decode(digits)
        codes = np.stack([l1.astype(np.uint64), l2.astype(np.uint64), c3], axis=1)
        return codes, (r1, r2, r3)


def res_kmeans_fsq_fit(data, K: int = DEFAULT_K, fsq_dims: int = DEFAULT_FSQ_DIMS,
                       L: int = DEFAULT_FSQ_LEVEL, seed: int = 0, max_iters: int = 100,
                       fsq_epochs: int = 10, fsq_lr: float = 0.1,
                       threads: int = 1) -> ResKmeansFsqModel:
    x = _as_data(data)
    cb1 = kmeans_fit(x, K, max_iters, seed, threads)
    l1, _ = assign_nearest(x, cb1.centroids, threads)
    m1 = x - cb1.centroids[l1]
    cb2 = kmeans_fit(m1, K, max_iters, seed + 1, threads)
    l2, _ = assign_nearest(m1, cb2.centroids, threads)
    m2 = m1 - cb2.centroids[l2]
    fsq = fsq_train(m2, fsq_dims, L, seed + 2, epochs=fsq_epochs, lr=fsq_lr)
    m3 = m2 - fsq.decode(fsq.digits(m2))
    report = tuple(float(np.mean(r ** 2)) for r in (m1, m2, m3))
    log.info("res-kmeans-fsq level mse: %s", ", ".join(f"{v:.6g}" for v in report))
    return ResKmeansFsqModel(cb1, cb2, fsq, report)


def assign_sid(model: ResKmeansFsqModel, m) -> SemanticId:
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    codes, _ = model.encode(m[None, :])
    return SemanticId(int(codes[0, 0]), int(codes[0, 1]), int(codes[0, 2]))


def assign_sids(model, data, threads: int = 1) -> np.ndarray:
    """Batch SID assignment, ``(n, 3)`` uint64 codes in row order."""
    codes, _ = model.encode(_as_data(data), threads)
    return codes


def reconstruct(model: ResKmeansFsqModel, sid) -> np.ndarray:
    c1, c2, c3 = (int(v) for v in sid)
    if not 0 <= c1 < model.level1.K:
        raise ValueError(f"c1={c1} outside [0, {model.level1.K})")
    if not 0 <= c2 < model.level2.K:
        raise ValueError(f"c2={c2} outside [0, {model.level2.K})")
    digits = model.fsq.unpack(c3)
    return (model.level1.centroids[c1] + model.level2.centroids[c2]
            + model.fsq.decode(digits[None, :])[0])


def level_mse_report(model, data) -> tuple:
    """Per-element mean squared residual after each quantization stage."""
    if isinstance(data, EmbeddingMatrix) and data.n == 0:
        raise ValueError("empty data")
    x = np.asarray(data.as_float64() if isinstance(data, EmbeddingMatrix) else data,
                   dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("empty data")
    _, residuals = model.encode(x)
    return tuple(float(np.mean(r ** 2)) for r in residuals)


# --------------------------------------------------------------------------
# plain three-level residual K-means (comparison baseline)

@dataclass(frozen=True, eq=False)
class ResKmeansModel:
    levels: tuple = field(default_factory=tuple)

    @property
    def d(self) -> int:
        return self.levels[0].d

    @property
    def vocab_sizes(self) -> tuple:
        return tuple(cb.K for cb in self.levels)

    def encode(self, x, threads: int = 1):
        r = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if r.shape[1] != self.d:
            raise ValueError(f"input dimension {r.shape[1]} != model dimension {self.d}")
        codes, residuals = [], []
        for cb in self.levels:
            lab, _ = assign_nearest(r, cb.centroids, threads)
            r = r - cb.centroids[lab]
            codes.append(lab.astype(np.uint64))
            residuals.append(r)
        return np.stack(codes, axis=1), tuple(residuals)


def res_kmeans_fit(data, K: int = DEFAULT_K, levels: int = 3, seed: int = 0,
                   max_iters: int = 100, threads: int = 1) -> ResKmeansModel:
    r = _as_data(data)
    books = []
    for level in range(levels):
        cb = kmeans_fit(r, K, max_iters, seed + level, threads)
        lab, _ = assign_nearest(r, cb.centroids, threads)
        r = r - cb.centroids[lab]
        books.append(cb)
    return ResKmeansModel(tuple(books))


# --------------------------------------------------------------------------
# persistence

def save_quantizer(model, path) -> None:
    if isinstance(model, ResKmeansFsqModel):
        save_container(path, "res_kmeans_fsq",
                       {"level1": model.level1.centroids, "level2": model.level2.centroids,
                        "W": model.fsq.W, "W_out": model.fsq.W_out},
                       {"L": model.fsq.L, "n_fsq": model.fsq.n_fsq,
                        "training_report": list(model.training_report)})
    elif isinstance(model, ResKmeansModel):
        save_container(path, "res_kmeans",
                       {f"level{i + 1}": cb.centroids for i, cb in enumerate(model.levels)},
                       {"levels": len(model.levels)})
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")


def load_quantizer(path):
    kind, arr, meta = load_container(path)
    if kind == "res_kmeans_fsq":
        fsq = FsqQuantizer(arr["W"], arr["W_out"], meta["L"])
        if fsq.n_fsq != meta["n_fsq"]:
            raise ValueError(f"{path}: n_fsq metadata disagrees with W")
        return ResKmeansFsqModel(KmeansCodebook(arr["level1"]), KmeansCodebook(arr["level2"]),
                                 fsq, tuple(meta["training_report"]))
    if kind == "res_kmeans":
        return ResKmeansModel(tuple(KmeansCodebook(arr[f"level{i + 1}"])
                                    for i in range(meta["levels"])))
    raise ValueError(f"{path}: container kind {kind!r} is not a quantizer")
