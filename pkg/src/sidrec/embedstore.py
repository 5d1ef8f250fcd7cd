"""Item embedding storage, the SIDF binary format, and PCA reduction."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SIDF"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")


class EmbeddingFormatError(ValueError):
    """File is not an embedding file (magic/version)."""


class EmbeddingCorruptionError(ValueError):
    """Header and payload disagree."""


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Ordered item embeddings; ``ids`` are uint64, ``vectors`` float32 (n, d)."""

    ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.uint64).reshape(-1)
        vecs = np.asarray(self.vectors, dtype=np.float32)
        if vecs.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {vecs.shape}")
        if vecs.shape[0] != ids.shape[0]:
            raise ValueError(f"{ids.shape[0]} ids for {vecs.shape[0]} vectors")
        if not np.isfinite(vecs).all():
            raise ValueError("embedding vectors contain non-finite values")
        if np.unique(ids).shape[0] != ids.shape[0]:
            raise ValueError("item ids must be unique within a matrix")
        ids.setflags(write=False)
        vecs.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", vecs)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (self.vectors.shape == other.vectors.shape
                and np.array_equal(self.ids, other.ids)
                and self.vectors.tobytes() == other.vectors.tobytes())

    def index_of(self) -> dict:
        return {int(i): row for row, i in enumerate(self.ids)}

    def as_float64(self) -> np.ndarray:
        return self.vectors.astype(np.float64)


def save_embeddings(m: EmbeddingMatrix, path) -> None:
    if m.n == 0:
        raise ValueError("refusing to save an empty embedding matrix")
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (m.d,))])
    payload = np.empty(m.n, dtype=rec)
    payload["id"] = m.ids
    payload["vec"] = m.vectors
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, m.n, m.d))
            fh.write(payload.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc


def load_embeddings(path) -> EmbeddingMatrix:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic, not an SIDF embedding file")
    if len(buf) < _HEADER.size:
        raise EmbeddingCorruptionError(f"{path}: truncated header")
    _, version, n, d = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    expected = n * (8 + 4 * d)
    if len(buf) - _HEADER.size != expected:
        raise EmbeddingCorruptionError(
            f"{path}: header says n={n}, d={d} ({expected} payload bytes) "
            f"but payload has {len(buf) - _HEADER.size} bytes")
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (d,))])
    payload = np.frombuffer(buf, dtype=rec, count=n, offset=_HEADER.size)
    return EmbeddingMatrix(payload["id"].copy(), payload["vec"].reshape(n, d).copy())


def read_jsonl_embeddings(path) -> EmbeddingMatrix:
    """Import human-authored ``{"item_id": ..., "vector": [...]}`` lines."""
    ids, vecs = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                ids.append(int(rec["item_id"]))
                vecs.append([float(v) for v in rec["vector"]])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad embedding record: {exc}") from exc
    if not ids:
        raise ValueError(f"{path}: no embedding records")
    dims = {len(v) for v in vecs}
    if len(dims) != 1:
        raise ValueError(f"{path}: inconsistent vector dimensions {sorted(dims)}")
    return EmbeddingMatrix(np.array(ids, dtype=np.uint64), np.array(vecs))


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray                # (d,)
    components: np.ndarray          # (r, d), orthonormal rows
    explained_variance: np.ndarray  # (r,), non-increasing

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    @property
    def r(self) -> int:
        return self.components.shape[0]

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.components + self.mean


def pca_fit(m: EmbeddingMatrix, r: int) -> PcaModel:
    """Exact PCA through an eigendecomposition of the d x d covariance."""
    if not 1 <= r <= m.d:
        raise ValueError(f"rank r={r} must satisfy 1 <= r <= d={m.d}")
    if m.n < 2:
        raise ValueError("PCA needs at least 2 rows")
    x = m.as_float64()
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (m.n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:r]
    comps = evecs[:, order].T
    # sign convention: largest-magnitude coordinate positive
    flip = np.sign(comps[np.arange(r), np.argmax(np.abs(comps), axis=1)])
    comps = comps * np.where(flip == 0, 1.0, flip)[:, None]
    var = np.clip(evals[order], 0.0, None)
    return PcaModel(mean, comps, var)


def pca_apply(p: PcaModel, m: EmbeddingMatrix) -> EmbeddingMatrix:
    if m.d != p.d:
        raise ValueError(f"embedding dimension {m.d} != PCA input dimension {p.d}")
    z = (m.as_float64() - p.mean) @ p.components.T
    return EmbeddingMatrix(m.ids, z)


def save_pca(p: PcaModel, path) -> None:
    from .container import save_container
    save_container(path, "pca", {"mean": p.mean, "components": p.components,
                                 "explained_variance": p.explained_variance})


def load_pca(path) -> PcaModel:
    from .container import load_container
    _, arr, _ = load_container(path, "pca")
    return PcaModel(arr["mean"], arr["components"], arr["explained_variance"])
