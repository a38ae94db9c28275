import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atha import tensor as T
from atha.errors import DegenerateInputError, ShapeError
from atha.gradcheck import check_op
from atha.tensor import Tensor

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def mat(rows, cols):
    return arrays(np.float64, (rows, cols), elements=finite)


# --------------------------------------------------------------------------
# forward examples


def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(np.eye(2), m).data, m)
    assert np.array_equal(T.matmul(m, np.array([[0.0], [1.0]])).data, [[2.0], [4.0]])
    assert np.array_equal(T.matmul(np.zeros((3, 2)), m).data, np.zeros((3, 2)))


def test_matmul_matches_scalar_loops():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    ref = [[sum(a[i, k] * b[k, j] for k in range(3)) for j in range(5)] for i in range(4)]
    np.testing.assert_allclose(T.matmul(a, b).data, ref, rtol=0, atol=1e-14)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_layer_norm_examples():
    one, zero = np.ones(4), np.zeros(4)
    assert np.array_equal(T.layer_norm(np.full(4, 3.0), one, zero).data, np.zeros(4))
    out = T.layer_norm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2), eps=1e-12).data
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-9)
    with pytest.raises(ShapeError):
        T.layer_norm(np.zeros((2, 0)), np.zeros(0), np.zeros(0))


def test_layer_norm_moments():
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 3.0, size=37)
    eps = 1e-5
    y = T.layer_norm(x, np.ones(37), np.zeros(37), eps).data
    var = x.var()
    assert abs(y.mean()) < 1e-12
    assert abs(y.var() - var / (var + eps)) < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(np.zeros(5)).data, np.full(5, 0.2), atol=1e-15)
    big = T.softmax(np.array([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == 1.0 and big[1] < 1e-300
    np.testing.assert_allclose(T.softmax(np.array([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


@given(arrays(np.float64, (3, 6), elements=st.floats(-500, 500)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(x).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(y >= 0)


def test_cosine_examples():
    u = np.array([0.3, -2.0, 1.5])
    assert T.cosine_similarity(u, u).item() == pytest.approx(1.0, abs=1e-15)
    assert T.cosine_similarity(u, -u).item() == pytest.approx(-1.0, abs=1e-15)
    ref = float(mpmath.mpf(1) / mpmath.sqrt(2))
    assert T.cosine_similarity([1.0, 0.0], [1.0, 1.0]).item() == pytest.approx(ref, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        T.cosine_similarity(np.zeros(3), u)


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_cosine_bounded(u, v):
    if np.linalg.norm(u) == 0 or np.linalg.norm(v) == 0:
        return
    c = T.cosine_similarity(u, v).item()
    assert -1 - 1e-12 <= c <= 1 + 1e-12


def test_cross_entropy_examples():
    assert T.cross_entropy_from_similarities(np.full(5, 0.3), 2, 0.01).item() == pytest.approx(math.log(5))
    assert T.cross_entropy_from_similarities(np.array([1.0, 0, 0]), 0, 1e-3).item() < 1e-100
    sims = [0.9, 0.1, 0.1, 0.1, 0.1]
    mpmath.mp.dps = 50
    logits = [mpmath.mpf(s) / mpmath.mpf("0.01") for s in ["0.9", "0.1", "0.1", "0.1", "0.1"]]
    ref = -(logits[0] - mpmath.log(sum(mpmath.exp(z) for z in logits)))
    assert T.cross_entropy_from_similarities(np.array(sims), 0, 0.01).item() == pytest.approx(float(ref), rel=1e-12)
    with pytest.raises(IndexError):
        T.cross_entropy_from_similarities(np.zeros(3), 3, 0.1)


def test_trivial_ops():
    x = np.random.default_rng(1).normal(size=(3, 4))
    assert T.gelu(0.0).item() == 0.0
    assert np.array_equal(T.add(x, np.zeros_like(x)).data, x)
    assert np.array_equal(T.scale(x, 1.0).data, x)
    with pytest.raises(IndexError):
        T.gather_rows(x, [3])


# --------------------------------------------------------------------------
# backward


def test_backward_examples():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))

    s = Tensor(3.0, requires_grad=True)
    T.backward(T.mul(s, s))
    assert s.grad == 6.0


def test_backward_accumulates_and_resets():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward(T.tsum(T.mul(x, x)))
    T.backward(T.tsum(T.mul(x, x)))
    assert np.array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.mul(x, x))


def test_no_grad_buffer_for_frozen_tensors():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)))
    T.backward(T.tsum(T.matmul(a, b)))
    assert b.grad is None and a.grad.shape == a.shape


def test_tape_is_topological_and_unique():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.mul(x, x)
    z = T.add(y, T.gelu(y))
    loss = T.tsum(T.add(z, y))
    tape = T.backward(loss)
    pos = {id(t): i for i, t in enumerate(tape.order)}
    assert len(pos) == len(tape.order)
    for t in tape.order:
        if t._node is not None:
            assert all(pos[id(p)] < pos[id(t)] for p in t._node.parents if p.requires_grad)


def test_cosine_gradient_against_finite_differences():
    rng = np.random.default_rng(7)
    v = rng.normal(size=6)
    assert check_op(lambda u: T.cosine_similarity(u, v), [rng.normal(size=6)], rng) < 1e-6


def _ops(rng):
    """(name, fn, input arrays, inputs to differentiate) for one random instance."""
    n, d = rng.integers(2, 5), rng.integers(2, 6)
    x = rng.normal(size=(n, d))
    y = rng.normal(size=(n, d))
    w = rng.normal(size=(d, 3))
    idx = rng.integers(0, n, size=4)
    rows = rng.permutation(n)[:2]
    labels = rng.integers(0, d, size=n)
    return [
        ("add", T.add, [x, y], None),
        ("sub", T.sub, [x, y], None),
        ("mul", T.mul, [x, y], None),
        ("mul_broadcast", T.mul, [x, rng.normal(size=d)], None),
        ("scale", lambda a: T.scale(a, -1.7), [x], None),
        ("gelu", T.gelu, [x], None),
        ("matmul", T.matmul, [x, w], None),
        ("matmul_batched", T.matmul, [rng.normal(size=(2, n, d)), rng.normal(size=(2, d, 3))], None),
        ("linear", T.linear, [rng.normal(size=(2, n, d)), rng.normal(size=(3, d)), rng.normal(size=3)], None),
        ("transpose", T.transpose, [x], None),
        ("transpose_axes", lambda a: T.transpose(a, (2, 0, 1)), [rng.normal(size=(2, 3, 4))], None),
        ("reshape", lambda a: T.reshape(a, (-1,)), [x], None),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [x, y], None),
        ("gather_rows", lambda a: T.gather_rows(a, idx), [x], None),
        ("index_add_rows", lambda a, b: T.index_add_rows(a, rows, b), [x, rng.normal(size=(2, d))], None),
        ("sum", lambda a: T.tsum(a, axis=0), [x], None),
        ("mean", lambda a: T.reduce_mean(a, axis=-1, keepdims=True), [x], None),
        ("layer_norm", T.layer_norm, [x, rng.normal(size=d), rng.normal(size=d)], None),
        ("softmax", T.softmax, [x], None),
        ("log_softmax", T.log_softmax, [x], None),
        ("l2_normalize", T.l2_normalize, [x], None),
        ("norm", T.norm, [x], None),
        ("cosine", T.cosine_similarity, [x, y], None),
        ("cosine_matrix", T.cosine_matrix, [x, rng.normal(size=(3, d))], None),
        ("cross_entropy", lambda s: T.cross_entropy_from_similarities(s, labels, 0.5),
         [x], None),
    ]


OP_NAMES = [name for name, *_ in _ops(np.random.default_rng(0))]


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradients(name):
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([OP_NAMES.index(name), i])
        _, fn, inputs, wrt = next(op for op in _ops(rng) if op[0] == name)
        worst = max(worst, check_op(fn, inputs, rng, wrt=wrt))
    assert worst < 1e-4, f"{name}: relative error {worst:.2e}"


def test_determinism_in_process():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        loss = T.tsum(T.softmax(T.gelu(T.matmul(x, rng.normal(size=(5, 5))))))
        T.backward(loss)
        return loss.item(), x.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)


@settings(max_examples=50)
@given(mat(3, 4), mat(4, 2))
def test_matmul_agrees_with_numpy(a, b):
    assert np.array_equal(T.matmul(a, b).data, a @ b)
