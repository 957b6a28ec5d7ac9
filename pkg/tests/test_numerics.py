import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stretnet import numerics as nx
from stretnet.numerics import ConfigError, DimensionError, NumericError, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_hand_value():
    m = np.array([[3.0, 5.0], [7.0, 9.0]])
    assert np.array_equal(nx.matmul(np.eye(2), m).data, m)
    assert nx.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    assert np.allclose(nx.softmax_rows(np.zeros((1, 2))).data, [[0.5, 0.5]])
    assert np.allclose(nx.softmax_rows(np.array([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]])
    with pytest.raises(NumericError):
        nx.softmax_rows(np.array([[np.nan, 0.0]]))


def test_activations():
    assert nx.relu(np.array(-2.0)).item() == 0.0
    assert nx.relu(np.array(3.0)).item() == 3.0
    assert nx.silu(np.array(0.0)).item() == 0.0
    assert nx.silu(np.array(1.0)).item() == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)


def test_layer_norm_examples():
    out = nx.layer_norm(np.array([1.0, 3.0]), eps=0.0).data
    assert np.allclose(out, [-1.0, 1.0])
    assert np.array_equal(nx.layer_norm(np.full(4, 7.0)).data, np.zeros(4))


def test_group_norm_degenerate_and_errors():
    x = np.random.default_rng(0).normal(size=(3, 8))
    assert np.array_equal(nx.group_norm(x, 8).data, np.zeros((3, 8)))
    with pytest.raises(ConfigError):
        nx.group_norm(x, 3)


def test_group_norm_matches_per_group_layer_norm():
    x = np.random.default_rng(1).normal(size=(2, 5, 12))
    out = nx.group_norm(x, 3).data
    for g in range(3):
        sl = x[..., 4 * g:4 * (g + 1)]
        ref = (sl - sl.mean(-1, keepdims=True)) / np.sqrt(sl.var(-1, keepdims=True) + nx.GROUP_NORM_EPS)
        assert np.allclose(out[..., 4 * g:4 * (g + 1)], ref, atol=1e-12)


def test_pointwise_linear_examples():
    x = np.random.default_rng(2).normal(size=(3, 4, 5))
    assert np.allclose(nx.pointwise_linear(x, np.eye(5), np.zeros(5)).data, x)
    assert nx.pointwise_linear(np.array([[3.0]]), np.array([[2.0]]), np.array([1.0])).data.item() == 7.0
    assert nx.pointwise_linear(np.ones((4, 12, 1)), np.ones((1, 64))).shape == (4, 12, 64)
    with pytest.raises(DimensionError):
        nx.pointwise_linear(np.ones((4, 3)), np.ones((2, 2)))


def test_backward_examples():
    x = leaf(3.0)
    nx.backward(nx.sum(nx.square(x)))
    assert x.grad == 6.0
    a, b = leaf([1.0, 2.0]), leaf([5.0])
    nx.backward(nx.sum(nx.mul(a, a)))
    assert b.grad is None or np.all(b.grad == 0)
    with pytest.raises(ValueError):
        nx.backward(nx.mul(a, 2.0))


def test_no_grad_builds_no_tape():
    x = leaf([1.0, 2.0])
    with nx.no_grad():
        y = nx.mul(x, x)
    assert not y.requires_grad


def test_gradients_accumulate_on_leaves():
    x = leaf([1.0, -2.0])
    nx.backward(nx.sum(x))
    nx.backward(nx.sum(x))
    assert np.array_equal(x.grad, [2.0, 2.0])


def _check(fn, *arrays, tol=1e-5):
    params = [leaf(a) for a in arrays]
    err = nx.gradcheck(lambda: fn(*params), params, step=1e-4)
    assert err < tol, err


def test_gradcheck_elementwise_and_shape_ops():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    c = rng.normal(size=(3, 4))
    _check(lambda x, y: nx.sum(nx.mul(nx.add(x, y), nx.sub(x, y))), a, b)
    _check(lambda x: nx.mean(nx.square(nx.transpose(nx.reshape(x, (2, 6)), (1, 0)))), a)
    _check(lambda x: nx.sum(nx.mul(nx.concat([nx.narrow(x, 0, 2), nx.narrow(x, 1, 4)]), 1.5)), a)
    _check(lambda x: nx.sum(nx.sigmoid(x)) + nx.sum(nx.silu(x)), a)
    _check(lambda x: nx.sum(nx.mul(nx.softmax_rows(x), c)), a)


def test_gradcheck_matmul_broadcast():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(3, 1, 4, 4))
    x = rng.normal(size=(2, 3, 5, 6, 4))
    _check(lambda a, b: nx.sum(nx.square(nx.matmul(a, b))), x, w)
    _check(lambda a, b: nx.sum(nx.square(nx.matmul(a, b))), x, rng.normal(size=(4, 2)))


def test_gradcheck_norms():
    rng = np.random.default_rng(5)
    x, g, b = rng.normal(size=(2, 3, 8)), rng.normal(size=8), rng.normal(size=8)
    c = rng.normal(size=(2, 3, 8))
    _check(lambda x, g, b: nx.sum(nx.mul(nx.layer_norm(x, g, b), c)), x, g, b)
    _check(lambda x, g, b: nx.sum(nx.mul(nx.group_norm(x, 4, g, b), c)), x, g, b)


def test_gradcheck_rotate_pairs():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 6))
    ang = rng.normal(size=(3, 6))
    ang[:, 1::2] = ang[:, 0::2]
    c = rng.normal(size=(3, 6))
    _check(lambda x: nx.sum(nx.mul(nx.rotate_pairs(x, np.cos(ang), np.sin(ang)), c)), x)


def test_absolute_subgradient_zero_at_tie():
    x = leaf([0.0, 2.0, -1.0])
    nx.backward(nx.sum(nx.absolute(x)))
    assert x.grad.tolist() == [0.0, 1.0, -1.0]


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite),
       hnp.arrays(np.float64, st.integers(1, 5), elements=finite))
def test_broadcast_add_grad_sums_back(a, b):
    if a.shape[-1] != b.shape[-1]:
        b = np.resize(b, a.shape[-1])
    ta, tb = leaf(a), leaf(b)
    nx.backward(nx.sum(nx.add(ta, tb)))
    assert np.array_equal(ta.grad, np.ones_like(a))
    assert np.array_equal(tb.grad, np.full(b.shape, float(a.shape[0])))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_are_distributions(x):
    out = nx.softmax_rows(x).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite))
def test_layer_norm_zero_mean(x):
    out = nx.layer_norm(x).data
    assert np.allclose(out.mean(-1), 0.0, atol=1e-9)
