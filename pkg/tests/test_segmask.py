import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidrec.segmask import (DEFAULT_TEMPERATURE, AnnealSchedule, AttentionMask, SegmentLayout,
                            ToyParams, anneal_input_bias, build_segment_mask, info_nce_loss,
                            joint_loss, masked_softmax, ntp_cross_entropy, pooled_emb_vector,
                            toy_forward)


def test_hand_layout_2_1_1():
    m = build_segment_mask(SegmentLayout(2, 1, 1))
    rows = [set(np.flatnonzero(r)) for r in m.allow]
    assert rows == [{0}, {0, 1}, {0, 1, 2}, {0, 1, 2, 3}]
    assert m.to_text() == "1000\n1100\n1110\n1111"


def test_lone_compression_token_sees_itself():
    m = build_segment_mask(SegmentLayout(0, 1, 0))
    assert m.allow.tolist() == [[True]]
    with pytest.raises(ValueError):
        build_segment_mask(SegmentLayout(0, 0, 0))


def test_three_rules_by_enumeration():
    lay = SegmentLayout(3, 2, 3)
    m = build_segment_mask(lay)
    seg = ["in"] * 3 + ["emb"] * 2 + ["qa"] * 3
    for i in range(lay.n):
        for j in range(lay.n):
            if seg[i] == "in":
                want = seg[j] == "in" and j <= i
            elif seg[i] == "emb":
                want = seg[j] == "in" or i == j
            else:
                want = seg[j] != "qa" or j <= i
            assert m.allow[i, j] == want, (i, j)
    assert np.all(np.isneginf(m.bias[~m.allow]))
    assert np.all(m.bias[m.allow] == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 6))
def test_rows_never_empty(a, b, c):
    if a + b + c == 0:
        return
    lay = SegmentLayout(a, b, c)
    m = build_segment_mask(lay)
    assert m.allow.any(axis=1).all()
    for step in (0, 5, 10):
        assert anneal_input_bias(m, lay, step, AnnealSchedule(10)).allow.any(axis=1).all()


def test_anneal_endpoints_and_midpoint():
    lay = SegmentLayout(2, 1, 2)
    m = build_segment_mask(lay)
    sched = AnnealSchedule(10)
    qa_in = (lay.qa_slice, lay.input_slice)
    assert np.all(anneal_input_bias(m, lay, 0, sched).bias[qa_in] == 0.0)
    end = anneal_input_bias(m, lay, 10, sched)
    assert not end.allow[qa_in].any()
    half = anneal_input_bias(m, lay, 5, sched)
    np.testing.assert_allclose(half.bias[qa_in], math.log(0.5))
    assert half.bias[qa_in][0, 0] == pytest.approx(-0.693147, abs=1e-6)
    # other blocks untouched
    rest = np.ones_like(m.allow)
    rest[qa_in] = False
    assert np.array_equal(half.bias[rest], m.bias[rest])
    with pytest.raises(ValueError):
        anneal_input_bias(m, lay, 11, sched)


@pytest.mark.parametrize("shape", ["linear", "cosine"])
def test_anneal_bias_monotone(shape):
    lay = SegmentLayout(3, 1, 2)
    m = build_segment_mask(lay)
    sched = AnnealSchedule(20, shape)
    prev = 0.0
    for step in range(21):
        v = anneal_input_bias(m, lay, step, sched).bias[lay.qa_slice, lay.input_slice][0, 0]
        assert v <= prev
        prev = v
    assert sched.alpha(0) == 1.0 and sched.alpha(20) == 0.0


# --------------------------------------------------------------------------
# toy model information flow

def test_toy_forward_hand_case():
    p = ToyParams(np.eye(2), np.eye(2), np.array([[1.0, 0.0], [0.0, 2.0]]), np.eye(2))
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    mask = build_segment_mask(SegmentLayout(2, 0, 0))
    out = toy_forward(p, x, mask)
    # token 0 sees only itself; token 1 attends to both with logits (0, 1)/sqrt(2)
    assert out[0].tolist() == [2.0, 0.0]
    w0 = 1.0 / (1.0 + math.exp(1 / math.sqrt(2)))
    w1 = 1.0 - w0
    np.testing.assert_allclose(out[1], [0.0 + w0 * 1.0, 1.0 + w1 * 2.0], rtol=1e-15)


def _draw(seed, mutable_alpha=False):
    rng = np.random.default_rng(seed)
    lay = SegmentLayout(int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    e = int(rng.integers(2, 6))
    return rng, lay, ToyParams.random(e, seed), rng.normal(size=(lay.n, e))


@pytest.mark.parametrize("seed", range(20))
def test_segment_independence(seed):
    rng, lay, params, x = _draw(seed)
    mask = build_segment_mask(lay)
    base = toy_forward(params, x, mask)
    y = x.copy()
    y[lay.qa_slice] += rng.normal(size=y[lay.qa_slice].shape)
    assert np.array_equal(toy_forward(params, y, mask)[:lay.n_in + lay.n_emb],
                          base[:lay.n_in + lay.n_emb])
    z = x.copy()
    z[lay.emb_slice] += rng.normal(size=z[lay.emb_slice].shape)
    assert np.array_equal(toy_forward(params, z, mask)[lay.input_slice], base[lay.input_slice])


def test_two_layer_input_reaches_qa_only_through_compression():
    for seed in range(10):
        rng, lay, params, x = _draw(seed)
        params2 = ToyParams.random(x.shape[1], seed + 100)
        mask = anneal_input_bias(build_segment_mask(lay), lay, 4, AnnealSchedule(4))
        h1 = toy_forward(params, x, mask)
        out = toy_forward(params2, h1, mask)
        y = x.copy()
        y[lay.input_slice] += rng.normal(size=y[lay.input_slice].shape)
        h1y = toy_forward(params, y, mask)
        # freeze the layer-1 compression outputs at their unperturbed values
        h1y[lay.emb_slice] = h1[lay.emb_slice]
        assert np.array_equal(toy_forward(params2, h1y, mask)[lay.qa_slice], out[lay.qa_slice])
        # without freezing, information does arrive via compression
        free = toy_forward(params2, toy_forward(params, y, mask), mask)
        assert not np.array_equal(free[lay.qa_slice], out[lay.qa_slice])


def test_toy_forward_validates_shapes():
    p = ToyParams.random(3)
    mask = build_segment_mask(SegmentLayout(2, 1, 1))
    with pytest.raises(ValueError):
        toy_forward(p, np.zeros((3, 3)), mask)
    with pytest.raises(ValueError):
        toy_forward(p, np.zeros((4, 2)), mask)


def test_masked_softmax_ignores_disallowed():
    w = masked_softmax(np.array([[5.0, 1.0, 2.0]]), np.array([[-np.inf, 0.0, 0.0]]))
    assert w[0, 0] == 0.0
    np.testing.assert_allclose(w.sum(), 1.0)


# --------------------------------------------------------------------------
# pooling and losses

def test_pooling():
    lay = SegmentLayout(1, 2, 0)
    out = np.array([[9.0, 9.0], [1.0, 0.0], [0.0, 1.0]])
    assert pooled_emb_vector(out, lay).tolist() == [0.5, 0.5]
    same = np.array([[9.0, 9.0], [2.0, 3.0], [2.0, 3.0]])
    assert pooled_emb_vector(same, lay).tolist() == [2.0, 3.0]
    assert pooled_emb_vector(out[:2], SegmentLayout(1, 1, 0)).tolist() == [1.0, 0.0]
    with pytest.raises(ValueError):
        pooled_emb_vector(out, SegmentLayout(3, 0, 0))


def test_info_nce_cases():
    assert DEFAULT_TEMPERATURE == 0.05
    assert info_nce_loss([[1.0, 2.0]], [[3.0, 1.0]]) == 0.0
    same = np.ones((4, 3))
    assert info_nce_loss(same, same) == pytest.approx(math.log(4), abs=1e-12)
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[1.0, 1.0], [0.0, 1.0]]) / np.array([[math.sqrt(2)], [1.0]])
    # similarity matrix at tau=1: [[1/sqrt2, 0], [1/sqrt2, 1]]
    s = [[1 / math.sqrt(2), 0.0], [1 / math.sqrt(2), 1.0]]
    def ce(rows):
        return sum(math.log(sum(math.exp(v) for v in r)) - r[i] for i, r in enumerate(rows)) / 2
    cols = [[s[0][0], s[1][0]], [s[0][1], s[1][1]]]
    want = 0.5 * (ce(s) + ce(cols))
    assert info_nce_loss(a, b, temperature=1.0) == pytest.approx(want, rel=1e-12)
    with pytest.raises(FloatingPointError):
        info_nce_loss([[0.0, 0.0]], [[1.0, 0.0]])
    with pytest.raises(ValueError):
        info_nce_loss([[1.0]], [[1.0], [2.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 12))
def test_info_nce_permutation_equivariance(seed, B):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(B, 4)), rng.normal(size=(B, 4))
    perm = rng.permutation(B)
    assert info_nce_loss(a[perm], b[perm]) == pytest.approx(info_nce_loss(a, b), abs=1e-9)


def test_ntp_and_joint():
    logits = np.array([[0.0, 0.0], [2.0, 0.0]])
    want = (math.log(2) + math.log(1 + math.exp(-2))) / 2
    assert ntp_cross_entropy(logits, [0, 0]) == pytest.approx(want)
    assert joint_loss(1.3, 7.0, 0.0) == 1.3
    assert joint_loss(0.5, 0.5, 1.0) == 1.0
    with pytest.raises(ValueError):
        joint_loss(1.0, 1.0, -1.0)


def test_joint_gradient_is_sum_of_gradients():
    rng = np.random.default_rng(3)
    lay = SegmentLayout(2, 1, 2)
    mask = build_segment_mask(lay)
    e, V = 3, 4
    params = ToyParams.random(e, 1)
    tokens = rng.normal(size=(lay.n, e))
    pair = rng.normal(size=(2, e))
    head = rng.normal(size=(e, V))
    targets = rng.integers(0, V, size=lay.n_qa)

    def ntp(x):
        out = toy_forward(params, x, mask)
        return ntp_cross_entropy(out[lay.qa_slice] @ head, targets)

    def con(x):
        v = pooled_emb_vector(toy_forward(params, x, mask), lay)
        return info_nce_loss(np.vstack([v, pair[0]]), pair, temperature=0.5)

    def grad(f, x, h=1e-6):
        g = np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            g[idx] = (f(xp) - f(xm)) / (2 * h)
        return g

    lam = 0.7
    total = grad(lambda x: joint_loss(ntp(x), con(x), lam), tokens)
    np.testing.assert_allclose(total, grad(ntp, tokens) + lam * grad(con, tokens), atol=1e-6)


def test_mask_text_with_bias():
    lay = SegmentLayout(1, 1, 1)
    m = anneal_input_bias(build_segment_mask(lay), lay, 1, AnnealSchedule(2))
    rows = m.to_text(show_bias=True).splitlines()
    assert rows[2].split()[0] == f"{math.log(0.5):.6f}"
    assert isinstance(m, AttentionMask)
