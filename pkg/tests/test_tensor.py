import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tribranch import tensor as T
from tribranch.tensor import Tensor, no_grad


def matmul_oracle(a, b):
    """Naive triple-loop matrix product, independent of numpy's GEMM."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


# -- elementwise --------------------------------------------------------------


def test_relu_definition():
    out = T.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_add_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4)).astype(np.float32)
    out = T.add(Tensor(x), Tensor(np.zeros_like(x)))
    np.testing.assert_array_equal(out.data, x)


def test_mul_gradient_product_rule():
    a = Tensor([2.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    T.mul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, [3.0])
    np.testing.assert_allclose(b.grad, [2.0])


def test_elementwise_dispatch_and_errors():
    a = Tensor([1.0, 2.0])
    assert T.elementwise("negate", a).data.tolist() == [-1.0, -2.0]
    with pytest.raises(ValueError):
        T.elementwise("pow", a)
    with pytest.raises(ValueError):
        T.elementwise("add", a)  # missing second operand
    with pytest.raises(ValueError):
        T.elementwise("relu", a, a)  # unary op given two operands


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_scalar_broadcast_allowed():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = T.mul(x, Tensor(np.float32(3.0), requires_grad=True))
    assert y.data.shape == (2, 2)
    y.sum().backward()
    np.testing.assert_allclose(x.grad, np.full((2, 2), 3.0))


def test_dtype_mismatch_rejected():
    with pytest.raises(ValueError):
        T.add(Tensor(np.zeros(2, dtype=np.float32)), Tensor(np.zeros(2, dtype=np.float64)))


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        T.log(Tensor([1.0, 0.0]))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_binary_op_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(2, 3)), dtype=np.float64, requires_grad=True)
    b = Tensor(rng.uniform(0.5, 4.0, size=(2, 3)), dtype=np.float64, requires_grad=True)

    def f():
        return T.mul(T.add(a, b), T.log(b)).sum()

    report = T.grad_check(f, [a, b], names=["a", "b"])
    assert report.passed, report.lines()


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 3))
    out = T.matmul(Tensor(np.eye(3)), Tensor(a, dtype=np.float64))
    np.testing.assert_allclose(out.data, a)


def test_matmul_hand_example():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 3))
    out = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
    expect = matmul_oracle(a, b)
    np.testing.assert_allclose(out.data, expect, rtol=1e-12, atol=0)


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


def test_matmul_gradient():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(3, 4)), dtype=np.float64, requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), dtype=np.float64, requires_grad=True)
    report = T.grad_check(lambda: T.matmul(a, b).sum(), [a, b], names=["a", "b"])
    assert report.passed, report.lines()


# -- softmax ------------------------------------------------------------------


def test_softmax_uniform_logits():
    out = T.softmax_channel(Tensor(np.zeros((2, 2, 4))))
    np.testing.assert_allclose(out.data, 0.25)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(3, 5, 6))
    a = T.softmax_channel(Tensor(logits, dtype=np.float64))
    b = T.softmax_channel(Tensor(logits + 123.456, dtype=np.float64))
    np.testing.assert_allclose(a.data, b.data, atol=1e-9)


def test_softmax_closed_form():
    # e^0 = 1 and e^{ln 3} = 3 give probabilities 1/4 and 3/4.
    out = T.softmax_channel(Tensor(np.array([[[0.0, np.log(3.0)]]])))
    np.testing.assert_allclose(out.data, [[[0.25, 0.75]]], rtol=1e-6)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=10.0, size=(2, 3, 5))
    out = T.softmax_channel(Tensor(logits, dtype=np.float64))
    assert np.all(out.data > 0)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_rejects_nonfinite():
    bad = np.zeros((1, 1, 2))
    bad[0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        T.softmax_channel(Tensor(bad))


def test_softmax_gradient():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=(2, 2, 3)), dtype=np.float64, requires_grad=True)
    weights = Tensor(rng.normal(size=(2, 2, 3)), dtype=np.float64)

    def f():
        return T.mul(T.softmax_channel(logits), weights).sum()

    report = T.grad_check(f, [logits], names=["logits"])
    assert report.passed, report.lines()


# -- backward semantics -------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_power_rule():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.mul(x, x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_rejects_nonscalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(T.mul(x, x))


def test_backward_accumulates_across_calls():
    x = Tensor([3.0], requires_grad=True)
    T.mul(x, x).sum().backward()
    first = x.grad.copy()
    T.mul(x, x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * first)


def test_double_use_matches_duplicated_variable_oracle():
    rng = np.random.default_rng(6)
    vals = rng.normal(size=(4,))

    x = Tensor(vals, dtype=np.float64, requires_grad=True)
    T.mul(x, x).sum().backward()

    # Oracle: two independent copies, one per use; path grads add.
    x1 = Tensor(vals, dtype=np.float64, requires_grad=True)
    x2 = Tensor(vals, dtype=np.float64, requires_grad=True)
    T.mul(x1, x2).sum().backward()
    np.testing.assert_allclose(x.grad, x1.grad + x2.grad)


def test_no_grad_blocks_recording():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = T.mul(x, x)
    assert y.is_leaf and not y.requires_grad


def test_grad_stays_none_on_untracked_leaf():
    x = Tensor([1.0, 2.0])
    y = Tensor([3.0, 4.0], requires_grad=True)
    T.mul(x, y).sum().backward()
    assert x.grad is None
    assert y.grad is not None


# -- structural ops ------------------------------------------------------------


def test_sum_axis_and_reshape_gradients():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(2, 3, 4)), dtype=np.float64, requires_grad=True)
    w = Tensor(rng.normal(size=(3,)), dtype=np.float64)

    def f():
        reduced = T.tsum(T.tsum(x, axis=-1), axis=0)  # shape (3,)
        return T.mul(reduced, w).sum()

    report = T.grad_check(f, [x], names=["x"])
    assert report.passed, report.lines()

    y = T.reshape(x, (6, 4))
    assert y.data.shape == (6, 4)


def test_concat_forward_and_gradient():
    rng = np.random.default_rng(8)
    a = Tensor(rng.normal(size=(2, 2, 2)), dtype=np.float64, requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2, 3)), dtype=np.float64, requires_grad=True)
    out = T.concat([a, b], axis=-1)
    assert out.data.shape == (2, 2, 5)
    np.testing.assert_array_equal(out.data[..., :2], a.data)
    np.testing.assert_array_equal(out.data[..., 2:], b.data)

    w = Tensor(rng.normal(size=(2, 2, 5)), dtype=np.float64)
    report = T.grad_check(lambda: T.mul(T.concat([a, b], axis=-1), w).sum(), [a, b])
    assert report.passed, report.lines()


def test_compute_graph_topological_order():
    x = Tensor([1.0], requires_grad=True)
    y = T.mul(x, x)
    z = T.add(y, x).sum()
    graph = T.ComputeGraph.from_root(z)
    pos = {id(n.tensor): i for i, n in enumerate(graph.nodes)}
    for node in graph.nodes:
        for pid in node.input_ids:
            assert pos[pid] < pos[id(node.tensor)]
    assert len(graph.nodes) == len(pos)  # each node visited exactly once


# -- grad_check harness ---------------------------------------------------------


def test_grad_check_exact_for_linear():
    p = Tensor(np.random.default_rng(9).normal(size=(5,)), dtype=np.float64, requires_grad=True)
    report = T.grad_check(lambda: p.sum(), [p], names=["p"])
    assert report.passed
    assert report.worst < 1e-9


def test_grad_check_negative_control():
    """A deliberately corrupted backward rule must be caught."""
    p = Tensor([0.3, -0.7], dtype=np.float64, requires_grad=True)

    def broken_square(t):
        # claims d(x^2)/dx = 3x instead of 2x
        return T.apply_op(t.data * t.data, (t,), lambda g: [(t, g * 3.0 * t.data)], "broken")

    report = T.grad_check(lambda: broken_square(p).sum(), [p], names=["p"])
    assert not report.passed
    assert report.worst > 0.1
