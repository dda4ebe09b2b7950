import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neglab import tensorops as T
from neglab.errors import NonFiniteError, ShapeError

finite = st.floats(-50, 50, allow_nan=False, width=32)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def test_matmul_identity_and_zero():
    b = np.array([[3, 4], [5, 6]], dtype=np.float32)
    assert np.array_equal(T.matmul(np.eye(2), b), b)
    assert np.array_equal(T.matmul([[1, 2]], [[0], [0]]), [[0]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((64, 64)).astype(np.float32)
    b = rng.standard_normal((64, 64)).astype(np.float32)
    assert np.abs(T.matmul(a, b) - triple_loop(a, b)).max() < 1e-5


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_repeatable():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((33, 70)).astype(np.float32)
    b = rng.standard_normal((70, 17)).astype(np.float32)
    first = T.matmul(a, b)
    for _ in range(5):
        assert np.array_equal(T.matmul(a, b), first)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_matmul_rejects_overflow():
    big = np.full((1, 2), 3e38, dtype=np.float32)
    with pytest.raises(NonFiniteError):
        T.matmul(big, big.T)


def test_softmax_examples():
    s = np.zeros((2, 2), dtype=np.float32)
    p = T.masked_softmax_rows(s)
    assert p[0].tolist() == [1.0, 0.0]
    assert np.allclose(p[1], [0.5, 0.5])
    s3 = np.tile(np.array([1.0, 2.0, 3.0], dtype=np.float32), (3, 1))
    p3 = T.masked_softmax_rows(s3)
    e = [math.exp(v) for v in (1, 2, 3)]
    ref = [v / sum(e) for v in e]
    assert np.allclose(p3[2], ref, atol=1e-6)
    assert np.allclose(p3[2], [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_softmax_all_masked_row_rejected():
    s = np.zeros((2, 2), dtype=np.float32)
    with pytest.raises(ShapeError):
        T.masked_softmax_rows(s, mask=np.array([[False, False], [True, True]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 12)).map(lambda t: (t[0], t[0])), elements=finite))
def test_softmax_rows_sum_to_one_and_masked_exact_zero(s):
    p = T.masked_softmax_rows(s)
    assert np.all(np.abs(p.sum(axis=-1) - 1) <= 1e-6)
    assert np.all(p[np.triu_indices(s.shape[0], 1)] == 0.0)


def test_softmax_large_scores_stable():
    s = np.array([[1000.0, 0.0], [1000.0, 1000.0]], dtype=np.float32)
    p = T.masked_softmax_rows(s)
    assert np.allclose(p[1], [0.5, 0.5])


def test_rms_norm_examples():
    ones = np.ones(8, dtype=np.float32)
    assert np.allclose(T.rms_norm(ones, ones, eps=0.0), ones)
    out = T.rms_norm([3.0, 4.0], [1.0, 1.0], eps=0.0)
    assert np.allclose(out, [3 / math.sqrt(12.5), 4 / math.sqrt(12.5)], atol=1e-6)
    assert np.allclose(out, [0.8485, 1.1314], atol=1e-4)


def test_rms_norm_dimension_mismatch():
    with pytest.raises(ShapeError):
        T.rms_norm(np.ones(4), np.ones(3))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float32, st.integers(1, 32), elements=st.integers(-100, 100).filter(bool).map(lambda v: v / 10.0)),
    st.sampled_from([0.5, 2.0, 10.0]),
)
def test_rms_norm_scale_invariance(x, c):
    g = np.ones_like(x)
    assert np.abs(T.rms_norm(c * x, g, eps=0.0) - T.rms_norm(x, g, eps=0.0)).max() <= 1e-6 * max(1, np.abs(x).max())


def test_layer_norm_matches_definition():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(10).astype(np.float32)
    g = rng.standard_normal(10).astype(np.float32)
    b = rng.standard_normal(10).astype(np.float32)
    x64 = x.astype(np.float64)
    ref = (x64 - x64.mean()) / np.sqrt(x64.var() + 1e-5) * g + b
    assert np.allclose(T.layer_norm(x, g, b, 1e-5), ref, atol=1e-5)


def test_activations():
    assert T.gelu(np.zeros(3)).tolist() == [0.0, 0.0, 0.0]
    x = np.linspace(-4, 4, 17).astype(np.float32)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    assert np.allclose(T.gelu(x), ref, atol=1e-6)
    assert np.allclose(T.silu(x), x / (1 + np.exp(-x.astype(np.float64))), atol=1e-6)


@pytest.mark.parametrize("style", ["interleaved", "half"])
def test_rotary_position_zero_is_identity(style):
    x = np.random.default_rng(3).standard_normal((1, 8)).astype(np.float32)
    assert np.array_equal(T.rotary_apply(x, style=style), x)


@pytest.mark.parametrize("style", ["interleaved", "half"])
def test_rotary_preserves_norm_and_relative_dot(style):
    rng = np.random.default_rng(4)
    q = rng.standard_normal(8).astype(np.float32)
    k = rng.standard_normal(8).astype(np.float32)
    rq = T.rotary_apply(np.tile(q, (6, 1)), style=style)
    rk = T.rotary_apply(np.tile(k, (6, 1)), style=style)
    assert np.allclose(np.linalg.norm(rq, axis=1), np.linalg.norm(q), atol=1e-5)
    # <R_m q, R_n k> depends only on m - n
    assert np.isclose(rq[3] @ rk[1], rq[5] @ rk[3], atol=1e-5)


def test_rotary_interleaved_pairs():
    x = np.zeros((2, 4), dtype=np.float32)
    x[1] = [1, 0, 1, 0]
    out = T.rotary_apply(x, base=10000.0)
    assert np.allclose(out[1, :2], [math.cos(1), math.sin(1)], atol=1e-6)
    assert np.allclose(out[1, 2:], [math.cos(1e-2), math.sin(1e-2)], atol=1e-6)


def test_topk_bottomk():
    idx, vals = T.topk([1, 5, 5, 2], 2)
    assert idx.tolist() == [1, 2] and vals.tolist() == [5, 5]
    idx, _ = T.bottomk([3, 1, 1, 0], 3)
    assert idx.tolist() == [3, 1, 2]
    with pytest.raises(ShapeError):
        T.topk([1, 2], 3)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.integers(1, 40), elements=st.integers(-3, 3).map(float)))
def test_topk_full_is_reverse_of_bottomk_on_distinct_or_tied(v):
    ti, tv = T.topk(v, len(v))
    bi, bv = T.bottomk(v, len(v))
    assert np.all(np.diff(tv) <= 0) and np.all(np.diff(bv) >= 0)
    assert sorted(ti.tolist()) == list(range(len(v)))
    assert tv.tolist() == bv[::-1].tolist()
