import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ekd import tensor as T
from ekd.gradcheck import grad_check
from ekd.tensor import NumericalError, ShapeError, Tensor
from ekd.verify import op_cases


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- forward examples -------------------------------------------------------


def test_add_broadcasts_and_reduces_gradient():
    a, b = leaf(np.ones((2, 3))), leaf([1.0, 2.0, 3.0])
    y = T.tsum(a + b)
    y.backward()
    np.testing.assert_array_equal((a + b).data, [[2, 3, 4], [2, 3, 4]])
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, [2, 2, 2])


def test_incompatible_shapes_raise():
    with pytest.raises(ShapeError):
        T.add(leaf(np.ones((2, 3))), leaf(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        T.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))


def test_matmul_value():
    a = leaf([[1.0, 2.0], [3.0, 4.0]])
    b = leaf([[1.0], [1.0]])
    np.testing.assert_array_equal((a @ b).data, [[3.0], [7.0]])


def test_relu_gradient_is_step():
    x = leaf([-1.0, 0.5, 2.0])
    T.tsum(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0])


def test_conv2d_identity_kernel():
    x = leaf(np.arange(16.0).reshape(1, 1, 4, 4))
    w = leaf(np.zeros((1, 1, 3, 3)))
    w.data[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d(x, w, padding=1).data, x.data)


def test_conv2d_stride_output_shape():
    x = leaf(np.zeros((2, 3, 8, 8)))
    w = leaf(np.zeros((5, 3, 3, 3)))
    assert T.conv2d(x, w, stride=2, padding=1).shape == (2, 5, 4, 4)


def test_max_pool_routes_gradient_to_max():
    x = leaf([[[[1.0, 3.0], [2.0, 0.0]]]])
    y = T.max_pool2d(x, 2)
    assert y.data.item() == 3.0
    T.tsum(y).backward()
    np.testing.assert_array_equal(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])


def test_max_pool_tie_goes_to_first():
    x = leaf(np.ones((1, 1, 2, 2)))
    T.tsum(T.max_pool2d(x, 2)).backward()
    np.testing.assert_array_equal(x.grad.reshape(-1), [1, 0, 0, 0])


def test_batch_norm_training_normalizes_and_updates_running_stats():
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(3.0, 2.0, size=(16, 2, 3, 3)))
    rm, rv = np.zeros(2), np.ones(2)
    y = T.batch_norm2d(x, leaf(np.ones(2)), leaf(np.zeros(2)), rm, rv, training=True, momentum=0.9)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)))


def test_batch_norm_eval_leaves_stats_alone():
    rm, rv = np.full(2, 0.5), np.full(2, 4.0)
    x = leaf(np.ones((1, 2, 1, 1)))
    y = T.batch_norm2d(x, leaf(np.ones(2)), leaf(np.zeros(2)), rm, rv, training=False, eps=0.0)
    np.testing.assert_allclose(y.data.reshape(-1), [0.25, 0.25])
    np.testing.assert_array_equal(rm, [0.5, 0.5])


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        leaf([1.0, 2.0]).backward()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_raises():
    with pytest.raises(NumericalError):
        T.log(leaf([0.0, 1.0]))


def test_gradients_accumulate_across_backward_calls():
    x = leaf([1.0, 2.0])
    T.tsum(T.square(x)).backward()
    T.tsum(T.square(x)).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_shared_subexpression_accumulates():
    x = leaf([3.0])
    y = x * x + x
    T.tsum(y).backward()
    np.testing.assert_array_equal(x.grad, [7.0])


def test_only_leaves_receive_grad():
    x = leaf([1.0, 2.0])
    mid = x * 2.0
    T.tsum(mid).backward()
    assert mid.grad is None
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_no_grad_records_no_tape():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_detach_shares_data_but_blocks_gradient():
    x = leaf([1.0, 2.0])
    d = T.detach(x)
    assert d.data is x.data and not d.requires_grad
    y = T.tsum(x * d)
    y.backward()
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


def test_backward_is_deterministic():
    rng = np.random.default_rng(1)
    xs = rng.standard_normal((4, 3, 6, 6))
    ws = rng.standard_normal((2, 3, 3, 3))
    grads = []
    for _ in range(2):
        x, w = leaf(xs), leaf(ws)
        T.tsum(T.square(T.conv2d(x, w, padding=1))).backward()
        grads.append((x.grad.tobytes(), w.grad.tobytes()))
    assert grads[0] == grads[1]


# -- gradient checks --------------------------------------------------------


@pytest.mark.parametrize("name", list(op_cases(np.random.default_rng(0))))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradcheck(name, seed):
    fn, inputs = op_cases(np.random.default_rng(seed))[name]
    report = grad_check(fn, inputs, h=1e-4, tol=1e-5)
    assert report.passed, str(report)


def test_gradcheck_detects_wrong_gradient():
    def bad_square(x):
        out = T.square(x[0])
        # wrong backward: drop the factor 2
        out._backward = lambda g: [g * x[0].data]
        return T.tsum(out)

    report = grad_check(bad_square, [leaf([1.0, 2.0])])
    assert not report.passed


def test_gradcheck_excludes_relu_kink():
    report = grad_check(lambda x: T.tsum(T.relu(x[0])), [leaf([0.0, 1.0])], h=1e-4)
    assert report.excluded == [(0, 0)]
    assert report.passed


# -- softmax properties -----------------------------------------------------

finite_rows = arrays(np.float64, (3, 5), elements=st.floats(-50, 50, allow_nan=False))


@given(finite_rows)
@settings(max_examples=60, deadline=None)
def test_softmax_rows_are_distributions(x):
    p = T.softmax(Tensor(x), axis=1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@given(finite_rows, st.floats(-100, 100))
@settings(max_examples=60, deadline=None)
def test_log_softmax_shift_invariant(x, c):
    a = T.log_softmax(Tensor(x), axis=1).data
    b = T.log_softmax(Tensor(x + c), axis=1).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_log_softmax_stable_for_large_logits():
    y = T.log_softmax(Tensor(np.array([[1000.0, 0.0]])), axis=1).data
    assert y[0, 0] == 0.0 and math.isclose(y[0, 1], -1000.0)


def test_float32_is_default_for_non_float_input():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2, np.float64)).dtype == np.float64
    assert Tensor([1, 2], dtype=np.float64).dtype == np.float64
