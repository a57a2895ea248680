import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from semcomp import tensor as T
from semcomp.tensor import Tensor

finite = st.floats(-20, 20, allow_nan=False, width=64)


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_matmul_hand_cases():
    a = t64([[1, 2], [3, 4]])
    b = t64([[5, 6], [7, 8]])
    assert np.array_equal(T.matmul(a, b).data, [[19, 22], [43, 50]])
    x = np.random.default_rng(0).standard_normal((4, 4))
    assert np.array_equal(T.matmul(t64(x), t64(np.eye(4))).data, x)


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.allclose(T.matmul(t64(a), t64(b)).data, ref, atol=1e-6)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((4, 2))))


def test_softmax_cases():
    assert np.allclose(T.softmax_masked(t64(np.zeros((2, 5)))).data, 0.2)
    out = T.softmax_masked(t64([0.0, 0.0, 0.0]), np.array([True, True, False]))
    assert np.allclose(out.data, [0.5, 0.5, 0.0])
    x = np.random.default_rng(2).standard_normal(6)
    ref = np.exp(x) / np.exp(x).sum()
    assert np.allclose(T.softmax_masked(t64(x)).data, ref, atol=1e-6)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(T.DegenerateRowError):
        T.softmax_masked(t64(np.zeros((2, 3))), np.array([[True, False, False], [False, False, False]]))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = T.softmax_masked(t64(x)).data
    assert np.allclose(p.sum(-1), 1.0, atol=1e-9)
    assert (p >= 0).all()


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
def test_logsumexp_shift_equivariance(x, c):
    a = T.logsumexp(t64(x)).data
    b = T.logsumexp(t64(x + c)).data
    assert np.allclose(a + c, b, atol=1e-9)


def test_layer_norm_cases():
    d = 6
    z = T.layer_norm(t64(np.full((2, d), 3.0)), t64(np.ones(d)), t64(np.zeros(d)))
    assert np.allclose(z.data, 0.0)
    beta = np.arange(d, dtype=np.float64)
    x = np.random.default_rng(3).standard_normal((4, d))
    y = T.layer_norm(t64(x), t64(np.ones(d)), t64(beta)).data
    assert np.allclose(y.mean(-1), beta.mean())


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 8), elements=st.floats(-10, 10, allow_nan=False)))
def test_layer_norm_standardizes(x):
    if np.any(x.std(-1) < 1e-2):
        return
    y = T.layer_norm(t64(x), t64(np.ones(8)), t64(np.zeros(8))).data
    assert np.allclose(y.mean(-1), 0, atol=1e-6)
    assert np.allclose(y.var(-1), x.var(-1) / (x.var(-1) + 1e-5), atol=1e-6)


def test_cross_entropy_cases():
    assert np.isclose(T.cross_entropy_logits(t64(np.zeros((3, 50))), [0, 1, 2]).item(), np.log(50))
    lg = np.zeros((2, 4))
    lg[[0, 1], [1, 3]] = 30.0
    assert T.cross_entropy_logits(t64(lg), [1, 3]).item() < 1e-9
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((4, 10)), rng.integers(0, 10, 4)
    ref = np.mean(np.log(np.exp(x).sum(1)) - x[np.arange(4), y])
    assert np.isclose(T.cross_entropy_logits(t64(x), y).item(), ref, atol=1e-6)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy_logits(t64(np.zeros((2, 3))), [0, 3])


def test_cosine_cases():
    x = np.array([1.0, -2.0, 0.5])
    assert np.isclose(T.cosine_similarity(t64(x), t64(x)).item(), 1.0)
    assert T.cosine_similarity(t64([1.0, 0, 0]), t64([0, 1.0, 0])).item() == 0.0
    assert T.cosine_similarity(t64(np.zeros(3)), t64(x)).item() == 0.0
    rng = np.random.default_rng(5)
    u, v = rng.standard_normal(8), rng.standard_normal(8)
    ref = u @ v / np.linalg.norm(u) / np.linalg.norm(v)
    assert np.isclose(T.cosine_similarity(t64(u), t64(v)).item(), ref, atol=1e-6)


def test_detach_blocks_gradient():
    x = t64([1.0, 2.0, 3.0], grad=True)
    y = t64([4.0, 5.0, 6.0], grad=True)
    d = T.detach(x)
    assert np.array_equal(d.data, x.data)
    T.backward(T.sum_(d * y))
    assert x.grad is None or not x.grad.any()
    assert np.array_equal(y.grad, x.data)


def test_backward_linear_and_scalar_contract():
    x = t64(np.ones((2, 3)), grad=True)
    T.backward(T.sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    with pytest.raises(ValueError):
        T.backward(x * 2.0)


def test_backward_accumulates_shared_inputs():
    x = t64([2.0], grad=True)
    T.backward(T.sum_(x * x + x))
    assert np.allclose(x.grad, [5.0])


def test_primitive_anchors():
    assert T.gelu(t64([0.0])).data[0] == 0.0
    row = np.array([1.0, -2.0, 4.0])
    assert np.array_equal(T.mean_pool(t64(np.stack([row] * 4)), 0).data, row)
    table = np.random.default_rng(6).standard_normal((5, 3))
    assert np.array_equal(T.embedding_lookup(t64(table), np.array([2])).data[0], table[2])


def test_concat_shape_error():
    with pytest.raises(T.DimensionError):
        T.concat([t64(np.ones((2, 3))), t64(np.ones((2, 4)))], axis=0)


def test_no_grad_records_nothing():
    x = t64([1.0, 2.0], grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_strict_mode_catches_non_finite():
    with T.strict(), np.errstate(invalid="ignore"), pytest.raises(T.NonFiniteError):
        T.log(t64([-1.0]))


def test_float64_mode_sets_dtype():
    with T.float64():
        assert T.tensor([1.0]).dtype == np.float64
    assert T.tensor([1.0]).dtype == np.float32


def test_deep_graph_has_no_recursion_limit():
    x = t64([1.0], grad=True)
    y = x
    for _ in range(5000):
        y = y + 1.0
    T.backward(T.sum_(y))
    assert x.grad[0] == 1.0
