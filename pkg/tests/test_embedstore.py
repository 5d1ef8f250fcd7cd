import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidrec.embedstore import (EmbeddingCorruptionError, EmbeddingFormatError, EmbeddingMatrix,
                               load_embeddings, load_pca, pca_apply, pca_fit,
                               read_jsonl_embeddings, save_embeddings, save_pca)


def _matrix(n, d, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingMatrix(np.arange(100, 100 + n), rng.normal(size=(n, d)))


def test_roundtrip(tmp_path):
    m = _matrix(7, 5)
    save_embeddings(m, tmp_path / "e.sidf")
    assert load_embeddings(tmp_path / "e.sidf") == m


def test_hand_assembled_stream(tmp_path):
    vals = [[1.0, -2.5, 3.25], [0.0, 7.0, -0.125]]
    buf = b"SIDF" + struct.pack("<I", 1) + struct.pack("<Q", 2) + struct.pack("<I", 3)
    for item, row in zip((11, 12), vals):
        buf += struct.pack("<Q", item) + struct.pack("<3f", *row)
    p = tmp_path / "hand.sidf"
    p.write_bytes(buf)
    m = load_embeddings(p)
    assert m.n == 2 and m.d == 3
    assert m.ids.tolist() == [11, 12]
    assert m.vectors.tolist() == vals


def test_single_value_payload_bytes(tmp_path):
    p = tmp_path / "one.sidf"
    save_embeddings(EmbeddingMatrix([5], [[0.5]]), p)
    buf = p.read_bytes()
    assert buf[-4:] == struct.pack("<f", 0.5)
    assert buf[-4:] == bytes([0x00, 0x00, 0x00, 0x3F])
    assert len(buf) == 4 + 4 + 8 + 4 + 8 + 4


def test_wrong_magic(tmp_path):
    p = tmp_path / "x.sidf"
    p.write_bytes(b"JUNK" + bytes(40))
    with pytest.raises(EmbeddingFormatError):
        load_embeddings(p)


def test_wrong_version(tmp_path):
    p = tmp_path / "x.sidf"
    save_embeddings(_matrix(2, 2), p)
    buf = bytearray(p.read_bytes())
    buf[4:8] = struct.pack("<I", 9)
    p.write_bytes(bytes(buf))
    with pytest.raises(EmbeddingFormatError):
        load_embeddings(p)


def test_payload_size_mismatch(tmp_path):
    p = tmp_path / "x.sidf"
    save_embeddings(_matrix(3, 2), p)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(EmbeddingCorruptionError):
        load_embeddings(p)


def test_save_empty_rejected(tmp_path):
    with pytest.raises(ValueError):
        save_embeddings(EmbeddingMatrix(np.zeros(0), np.zeros((0, 3))), tmp_path / "e.sidf")


def test_matrix_validation():
    with pytest.raises(ValueError):
        EmbeddingMatrix([1, 1], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        EmbeddingMatrix([1], [[np.nan]])
    with pytest.raises(ValueError):
        EmbeddingMatrix([1, 2], np.zeros(2))
    m = _matrix(2, 2)
    with pytest.raises(ValueError):
        m.vectors[0, 0] = 1.0


def test_jsonl_import(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text('{"item_id": 3, "vector": [1, 2]}\n\n{"item_id": 4, "vector": [3.5, 4]}\n')
    m = read_jsonl_embeddings(p)
    assert m.ids.tolist() == [3, 4]
    assert m.vectors.tolist() == [[1, 2], [3.5, 4]]
    p.write_text('{"item_id": 3, "vector": [1, 2]}\n{"item_id": 4, "vector": [3]}\n')
    with pytest.raises(ValueError):
        read_jsonl_embeddings(p)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_roundtrip_property(tmp_path_factory, n, d, seed):
    rng = np.random.default_rng(seed)
    ids = np.unique(rng.integers(0, 2**63, size=n, dtype=np.uint64))
    n = ids.shape[0]
    m = EmbeddingMatrix(ids, rng.normal(scale=100, size=(n, d)))
    p = tmp_path_factory.mktemp("rt") / "e.sidf"
    save_embeddings(m, p)
    assert load_embeddings(p) == m


# --------------------------------------------------------------------------
# PCA

def test_collinear_points_single_component():
    x = np.linspace(-3, 3, 9)
    m = EmbeddingMatrix(np.arange(9), np.stack([x, 2 * x], axis=1))
    p = pca_fit(m, 1)
    total = np.var(m.as_float64(), axis=0, ddof=1).sum()
    assert p.explained_variance[0] == pytest.approx(total, rel=1e-6)
    z = pca_apply(p, m)
    rec = p.inverse(z.as_float64())
    np.testing.assert_allclose(rec, m.as_float64(), atol=1e-5)


def test_full_rank_reconstruction():
    m = _matrix(20, 4, seed=3)
    p = pca_fit(m, 4)
    np.testing.assert_allclose(p.inverse(pca_apply(p, m).as_float64()), m.as_float64(), atol=1e-5)


def test_against_eigen_oracle():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(5, 3))
    m = EmbeddingMatrix(np.arange(5), x)
    p = pca_fit(m, 2)
    xf = m.as_float64()
    # independent oracle: SVD of the centred data
    xc = xf - xf.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    np.testing.assert_allclose(p.explained_variance, s[:2] ** 2 / 4, atol=1e-6)
    for i in range(2):
        v = vt[i] * np.sign(vt[i][np.argmax(np.abs(vt[i]))])
        np.testing.assert_allclose(p.components[i], v, atol=1e-6)


def test_mean_maps_to_zero_and_hand_projection():
    m = EmbeddingMatrix([1, 2, 3, 4], [[0, 0], [2, 0], [0, 1], [2, 1]])
    p = pca_fit(m, 1)
    # x-variance 4/3 dominates y-variance 1/3: first component is (1, 0)
    np.testing.assert_allclose(p.components[0], [1.0, 0.0], atol=1e-12)
    z = pca_apply(p, EmbeddingMatrix([9, 10], [p.mean, [2.0, 0.0]]))
    assert z.vectors[0, 0] == 0.0
    assert z.vectors[1, 0] == pytest.approx((2.0 - 1.0) * 1.0 + (0.0 - 0.5) * 0.0)


def test_components_orthonormal_and_optimal():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(40, 6)) @ rng.normal(size=(6, 6))
    m = EmbeddingMatrix(np.arange(40), x)
    xf = m.as_float64()
    for r in range(1, 7):
        p = pca_fit(m, r)
        np.testing.assert_allclose(p.components @ p.components.T, np.eye(r), atol=1e-8)
        err = np.sum((p.inverse((xf - p.mean) @ p.components.T) - xf) ** 2)
        for _ in range(10):
            q, _ = np.linalg.qr(rng.normal(size=(6, r)))
            rand_err = np.sum(((xf - p.mean) @ q @ q.T + p.mean - xf) ** 2)
            assert err <= rand_err + 1e-9


def test_pca_errors_and_persistence(tmp_path):
    m = _matrix(10, 3)
    with pytest.raises(ValueError):
        pca_fit(m, 0)
    with pytest.raises(ValueError):
        pca_fit(m, 4)
    with pytest.raises(ValueError):
        pca_fit(_matrix(1, 3), 1)
    p = pca_fit(m, 2)
    with pytest.raises(ValueError):
        pca_apply(p, _matrix(3, 4))
    save_pca(p, tmp_path / "p.sidc")
    q = load_pca(tmp_path / "p.sidc")
    assert q.components.tobytes() == p.components.tobytes()
    assert q.mean.tobytes() == p.mean.tobytes()
