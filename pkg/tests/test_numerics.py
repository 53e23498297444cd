import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mars import numerics as nx

finite = st.floats(min_value=-50, max_value=50, allow_nan=False)


def _exact_softmax(row):
    getcontext().prec = 40
    ex = [Decimal(x).exp() for x in row]
    s = sum(ex)
    return [float(e / s) for e in ex]


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(nx.softmax_rows(np.array([[1.0, 2.0, 3.0]]))[0],
                               _exact_softmax([1, 2, 3]), atol=1e-15)
    np.testing.assert_allclose(nx.softmax_rows(np.array([[1.0, 2.0, 3.0]]))[0],
                               [0.09003, 0.24473, 0.66524], atol=5e-6)


@given(arrays(np.float64, (4, 6), elements=finite), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(m, c):
    out = nx.softmax_rows(m)
    assert np.all(out >= 0)
    assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-12)
    np.testing.assert_allclose(nx.softmax_rows(m + c), out, atol=1e-12)


def test_masked_softmax_zeroes_masked_entries():
    s = np.array([[1.0, 5.0, 2.0]])
    out = nx.masked_softmax(s, np.array([[True, False, True]]))
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out[0, [0, 2]], nx.softmax_rows(np.array([[1.0, 2.0]]))[0])


def test_layer_norm_examples():
    np.testing.assert_array_equal(nx.layer_norm(np.array([1.0, 1.0, 1.0])), np.zeros(3))
    np.testing.assert_allclose(nx.layer_norm(np.array([0.0, 2.0]), eps=1e-12), [-1.0, 1.0], atol=1e-9)
    y = nx.layer_norm(np.array([1.0, 2.0, 3.0, 4.0]))
    assert abs(y.mean()) < 1e-10
    assert abs(y.var() - 1.0) < 1e-5


def test_layer_norm_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((3, 5))

    def loss(p):
        return float(np.sum(nx.layer_norm(p["x"]) * w))

    y = nx.layer_norm(x)
    g = nx.layer_norm_backward(y, w, x)
    assert nx.finite_diff_check(loss, {"x": x}, {"x": g}, h=1e-6) < 1e-7


def test_cosine_examples():
    a = np.array([1.0, 2.0, -3.0])
    assert nx.cosine_similarity(a, a) == pytest.approx(1.0)
    assert nx.cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert nx.cosine_similarity(a, -a) == pytest.approx(-1.0)
    assert nx.cosine_similarity(np.zeros(3), a) == 0.0
    with pytest.raises(nx.ShapeError):
        nx.cosine_similarity([1.0], [1.0, 2.0])


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_cosine_bounded_and_symmetric(a, b):
    c = nx.cosine_similarity(a, b)
    assert -1.0 <= c <= 1.0
    assert c == nx.cosine_similarity(b, a)


def test_cosine_rows_agrees_with_scalar_version():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((7, 4))
    m[2] = 0.0
    q = rng.standard_normal(4)
    expect = [nx.cosine_similarity(r, q) for r in m]
    np.testing.assert_allclose(nx.cosine_rows(m, q), expect, atol=1e-15)


def test_rbf_examples():
    assert nx.rbf_kernel([0.3, -1.0], [0.3, -1.0], 0.7) == 1.0
    assert nx.rbf_kernel([0.0], [2.0], math.sqrt(2.0)) == pytest.approx(math.exp(-1.0), abs=1e-12)
    for bad in (0.0, -1.0):
        with pytest.raises(nx.BandwidthError):
            nx.rbf_kernel([0.0], [1.0], bad)


@given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite),
       st.floats(0.1, 10.0), st.floats(1.01, 3.0))
def test_rbf_properties(a, b, gamma, stretch):
    k = nx.rbf_kernel(a, b, gamma)
    assert 0.0 <= k <= 1.0
    assert k == nx.rbf_kernel(b, a, gamma)
    if np.any(a != b):
        far = a + stretch * (b - a)
        assert nx.rbf_kernel(a, far, gamma) <= k


def test_median_bandwidth_examples():
    img = np.array([[0.0]])
    txt = np.array([[1.0], [2.0], [3.0]])
    assert nx.median_bandwidth(img, txt) == 2.0
    same = np.ones((3, 2))
    assert nx.median_bandwidth(same, same) == 1.0
    with pytest.raises(nx.EmptyBatchError):
        nx.median_bandwidth(np.zeros((0, 2)), same)


def test_median_bandwidth_matches_brute_force():
    rng = np.random.default_rng(11)
    img, txt = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    dists = sorted(math.dist(a, b) for a in img for b in txt)
    oracle = (dists[31] + dists[32]) / 2
    assert nx.median_bandwidth(img, txt) == pytest.approx(oracle, rel=1e-14)


def _naive_attention(q, k, v, dk):
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        s = [sum(q[i, t] * k[j, t] for t in range(dk)) / math.sqrt(dk) for j in range(k.shape[0])]
        mx = max(s)
        w = [math.exp(x - mx) for x in s]
        z = sum(w)
        for j in range(k.shape[0]):
            out[i] += (w[j] / z) * v[j]
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_attention_matches_naive(nq, nk, dk, dv, seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.standard_normal((nq, dk)), rng.standard_normal((nk, dk)), rng.standard_normal((nk, dv))
    np.testing.assert_allclose(nx.scaled_dot_attention(q, k, v, dk), _naive_attention(q, k, v, dk),
                               atol=1e-12, rtol=0)


def test_attention_degenerate_cases():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((3, 4))
    v = rng.standard_normal((1, 5))
    np.testing.assert_allclose(nx.scaled_dot_attention(q, rng.standard_normal((1, 4)), v, 4),
                               np.repeat(v, 3, axis=0))
    vs = rng.standard_normal((4, 5))
    out = nx.scaled_dot_attention(q, np.ones((4, 4)), vs, 4)
    np.testing.assert_allclose(out, np.repeat(vs.mean(axis=0, keepdims=True), 3, axis=0), atol=1e-15)
    with pytest.raises(nx.ShapeError):
        nx.scaled_dot_attention(q, np.ones((4, 3)), vs, 4)
    with pytest.raises(nx.ShapeError):
        nx.scaled_dot_attention(q, np.ones((4, 4)), vs[:3], 4)


def test_sigmoid_is_stable():
    z = np.array([-800.0, -1.0, 0.0, 1.0, 800.0])
    out = nx.sigmoid(z)
    assert np.all(np.isfinite(out))
    assert out[2] == 0.5 and out[0] == 0.0 and out[-1] == 1.0
    assert out[1] == pytest.approx(1 - out[3])


def test_adamw_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.zeros(2)}
    state = nx.OptimizerState.for_params(p)
    new, st1 = nx.adamw_step(p, g, state)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert st1.step == 1 and state.step == 0
    state = nx.OptimizerState.for_params(p, lr=0.1, weight_decay=0.5)
    new, _ = nx.adamw_step(p, g, state)
    np.testing.assert_allclose(new["w"], p["w"] * (1 - 0.1 * 0.5))


def test_adamw_single_step_closed_form():
    p = {"w": np.array([0.5])}
    new, state = nx.adamw_step(p, {"w": np.array([1.0])}, nx.OptimizerState.for_params(p))
    m_hat = 0.1 / (1 - 0.9)
    v_hat = 0.001 / (1 - 0.999)
    assert new["w"][0] == pytest.approx(0.5 - 1e-3 * m_hat / (math.sqrt(v_hat) + 1e-8), abs=1e-15)
    assert state.m["w"][0] == pytest.approx(0.1)


@given(arrays(np.float64, 6, elements=st.floats(-5, 5).filter(lambda x: abs(x) > 1e-3)))
def test_adamw_moves_against_gradient(g):
    p = {"w": np.zeros(6)}
    new, _ = nx.adamw_step(p, {"w": g}, nx.OptimizerState.for_params(p))
    assert np.all(np.sign(new["w"]) == -np.sign(g))


def test_adamw_shape_errors():
    p = {"w": np.zeros(3)}
    with pytest.raises(nx.ShapeError):
        nx.adamw_step(p, {"w": np.zeros(2)}, nx.OptimizerState.for_params(p))
    with pytest.raises(nx.ShapeError):
        nx.adamw_step(p, {}, nx.OptimizerState.for_params(p))


def test_finite_diff_check_on_known_losses():
    rng = np.random.default_rng(5)
    p = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(4)}
    quad = lambda q: float(sum(np.sum(v * v) for v in q.values()))
    assert nx.finite_diff_check(quad, p, {k: 2 * v for k, v in p.items()}) < 1e-8
    c = {k: rng.standard_normal(v.shape) for k, v in p.items()}
    lin = lambda q: float(sum(np.sum(c[k] * q[k]) for k in q))
    assert nx.finite_diff_check(lin, p, c) < 1e-8
    with pytest.raises(nx.NumericError):
        nx.finite_diff_check(lambda q: float("nan"), p, c)
