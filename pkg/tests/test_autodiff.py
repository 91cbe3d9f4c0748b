import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avsk.autodiff import Tensor, backward, grad_check, ops, track_allocations
from avsk.autodiff.gradcheck import analytic_grad, max_rel_err, numeric_grad
from avsk.errors import CapacityError, ConfigError, ContractError, DimensionError, GraphError

from oracles import gradient_cases, naive_conv2d, naive_depthwise


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- tensor basics ----------------------------------------------------------------------


def test_tensor_rejects_nan_and_empty():
    with pytest.raises(ContractError):
        Tensor([1.0, np.nan])
    with pytest.raises(ContractError):
        Tensor(np.zeros((0, 3)))


def test_tensor_dtype_names():
    assert Tensor([1, 2], dtype="f32").dtype == np.float32
    assert Tensor([1, 2]).dtype == np.float64
    with pytest.raises(ValueError):
        Tensor([1], dtype="f16")


# -- matmul -------------------------------------------------------------------------------


def test_matmul_identity_and_arithmetic():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ops.matmul(T(np.eye(2)), T(m)).data, m)
    assert ops.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_matmul_gradients_are_transposed_products():
    rng = np.random.default_rng(0)
    a, b = T(rng.standard_normal((2, 3)), True), T(rng.standard_normal((3, 4)), True)
    g = rng.standard_normal((2, 4))
    backward(ops.sum(ops.mask_mul(ops.matmul(a, b), g)))
    assert np.allclose(a.grad, g @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ g)


# -- layer norm / softmax -------------------------------------------------------------------


def test_layer_norm_examples():
    y = ops.layer_norm(T([[1.0, 3.0]]), T([1.0, 1.0]), T([0.0, 0.0]), eps=0.0)
    assert np.allclose(y.data, [[-1.0, 1.0]])
    y = ops.normalize(T([[5.0, 5.0, 5.0]]), eps=1e-6)
    assert np.array_equal(y.data, np.zeros((1, 3)))


def test_layer_norm_row_statistics():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 8))
    y = ops.layer_norm(T(x), T(np.ones(8)), T(np.zeros(8)), eps=1e-6).data
    assert np.abs(y.mean(axis=1)).max() < 1e-6
    # eps sits under the square root, so the row variance is exactly v / (v + eps)
    v = x.var(axis=1)
    assert np.abs(y.var(axis=1) - v / (v + 1e-6)).max() < 1e-12
    x = rng.standard_normal((4, 8)) * 4.0
    y = ops.layer_norm(T(x), T(np.ones(8)), T(np.zeros(8)), eps=1e-6).data
    assert np.abs(y.var(axis=1) - 1.0).max() < 1e-6


def test_layer_norm_rejects_bad_gain():
    with pytest.raises(DimensionError):
        ops.layer_norm(T(np.ones((2, 3))), T(np.ones(2)), T(np.zeros(2)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)),
       arrays(np.float64, (3, 1), elements=st.floats(-100, 100)))
def test_layer_norm_shift_invariant(x, c):
    a = ops.normalize(T(x)).data
    b = ops.normalize(T(x + c)).data
    assert np.abs(a - b).max() < 1e-8


def test_softmax_examples():
    assert np.allclose(ops.softmax(T([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(ops.softmax(T([0.0, math.log(3.0)])).data, [0.25, 0.75])
    y = ops.softmax(T([1000.0, 0.0])).data
    assert np.all(np.isfinite(y)) and y[0] == 1.0 and y[1] < 1e-300


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
              elements=st.floats(-1000, 1000)))
def test_softmax_rows_sum_to_one(x):
    y = ops.softmax(T(x)).data
    assert np.all(y >= 0)
    assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-12


# -- convolutions ---------------------------------------------------------------------------


def test_depthwise_identity_and_average():
    x = np.random.default_rng(2).standard_normal((7, 3))
    delta = np.zeros((3, 3))
    delta[1] = 1.0
    assert np.array_equal(ops.depthwise_conv1d(T(x), T(delta)).data, x)
    const = np.full((6, 2), 4.0)
    y = ops.depthwise_conv1d(T(const), T(np.full((3, 2), 1 / 3))).data
    assert np.allclose(y[1:-1], const[1:-1])


def test_depthwise_matches_oracle_for_causal_taps():
    x = np.array([[1.0], [2.0], [3.0]])
    k = np.array([[0.0], [1.0], [1.0]])
    y = ops.depthwise_conv1d(T(x), T(k)).data
    assert np.array_equal(y, naive_depthwise(x, k))
    assert y[:, 0].tolist() == [3.0, 5.0, 3.0]


def test_depthwise_even_kernel_is_config_error():
    with pytest.raises(ConfigError):
        ops.depthwise_conv1d(T(np.ones((4, 2))), T(np.ones((2, 2))))


def test_depthwise_channels_independent():
    rng = np.random.default_rng(3)
    x, k = rng.standard_normal((6, 3)), rng.standard_normal((3, 3))
    base = ops.depthwise_conv1d(T(x), T(k)).data
    x2 = x.copy()
    x2[:, 1] += 5.0
    out = ops.depthwise_conv1d(T(x2), T(k)).data
    assert np.array_equal(out[:, [0, 2]], base[:, [0, 2]])


@pytest.mark.parametrize("seed", range(5))
def test_convs_match_naive_loops(seed):
    rng = np.random.default_rng(seed)
    t, d, kk = rng.integers(1, 9), rng.integers(1, 6), int(rng.choice([1, 3, 5, 7]))
    x, k = rng.standard_normal((t, d)), rng.standard_normal((kk, d))
    assert np.abs(ops.depthwise_conv1d(T(x), T(k)).data - naive_depthwise(x, k)).max() < 1e-12
    h, w, cin, cout = rng.integers(3, 9), rng.integers(3, 9), 2, 3
    img, ker = rng.standard_normal((h, w, cin)), rng.standard_normal((3, 3, cin, cout))
    for stride in (1, 2):
        for pad in ("same", "valid"):
            got = ops.conv2d(T(img), T(ker), stride=stride, padding=pad).data
            assert np.abs(got - naive_conv2d(img, ker, stride, pad)).max() < 1e-10


def test_conv2d_examples():
    img = np.random.default_rng(4).standard_normal((4, 5, 2))
    eye = np.zeros((1, 1, 2, 2))
    eye[0, 0] = np.eye(2)
    assert np.array_equal(ops.conv2d(T(img), T(eye)).data, img)
    ones = ops.conv2d(T(np.full((5, 5, 1), 2.0)), T(np.ones((3, 3, 1, 1)))).data
    assert np.allclose(ones[1:-1, 1:-1], 18.0)
    assert ops.conv2d(T(np.ones((5, 7, 1))), T(np.ones((3, 3, 1, 1))), stride=2).shape == (3, 4, 1)
    with pytest.raises(DimensionError):
        ops.conv2d(T(np.ones((2, 2, 1))), T(np.ones((3, 3, 1, 1))), padding="valid")


# -- backward -------------------------------------------------------------------------------


def test_backward_examples():
    x = T([1.0, -2.0, 3.0], True)
    backward(ops.sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x = T([1.0, -2.0, 3.0], True)
    backward(ops.sum(ops.mul(x, x)))
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_composite_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = T(rng.standard_normal((4, 3)), True)
    w1 = T(rng.standard_normal((3, 6)), True)
    w2 = T(rng.standard_normal((6, 5)), True)
    targets = rng.integers(0, 5, size=4)

    def f(x_, a, b):
        return ops.cross_entropy(ops.matmul(ops.softmax(ops.matmul(x_, a)), b), targets)
    assert grad_check(f, [x, w1, w2]) < 1e-5


def test_backward_fan_out_accumulates():
    rng = np.random.default_rng(6)
    x = T(rng.standard_normal(5), True)
    y = ops.add(ops.mul(x, x), ops.scale(x, 3.0))
    backward(ops.sum(y))
    assert np.allclose(x.grad, 2 * x.data + 3.0)


def test_backward_twice_raises():
    x = T([1.0, 2.0], True)
    loss = ops.sum(ops.mul(x, x))
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_backward_non_scalar_is_contract_error():
    x = T([1.0, 2.0], True)
    with pytest.raises(ContractError):
        backward(ops.scale(x, 2.0))


def test_backward_without_grad_leaf():
    with pytest.raises(GraphError):
        backward(ops.sum(T([1.0])))


def test_leaf_grad_accumulates_across_backward_calls():
    x = T([1.0, 2.0], True)
    backward(ops.sum(x))
    backward(ops.sum(ops.scale(x, 2.0)))
    assert x.grad.tolist() == [3.0, 3.0]


# -- grad_check -----------------------------------------------------------------------------


def test_grad_check_sum_is_exact():
    x = T(np.random.default_rng(7).standard_normal((3, 4)))
    # f is linear, so a wide step loses nothing and keeps roundoff small
    assert grad_check(lambda a: ops.sum(a), x, h=1e-4) < 1e-10


def test_grad_check_detects_corrupted_gradient():
    x = T(np.random.default_rng(8).standard_normal(6))
    f = lambda a: ops.sum(ops.mul(a, a))  # noqa: E731
    analytic = [2.0 * g for g in analytic_grad(f, [x])]
    err = max_rel_err(analytic, numeric_grad(f, [x]))
    assert abs(err - 0.5) < 1e-6  # |2g - g| / max(|2g|, |g|)
    assert not err < 1e-4


def test_grad_check_rejects_non_scalar_and_bad_step():
    x = T(np.ones(3))
    with pytest.raises(ContractError):
        grad_check(lambda a: ops.scale(a, 2.0), x)
    with pytest.raises(ContractError):
        grad_check(lambda a: ops.sum(a), x, h=1e-2)


@pytest.mark.parametrize("seed", range(5))
def test_every_primitive_passes_grad_check(seed):
    rng = np.random.default_rng(seed)
    bad = {}
    for name, inputs, fn in gradient_cases(rng):
        err = grad_check(fn, inputs)
        if not err < 1e-4:
            bad[name] = err
    assert not bad, bad


# -- allocator ------------------------------------------------------------------------------


def test_tracker_counts_and_caps():
    with track_allocations() as tr:
        a = T(np.ones(100))
        b = ops.scale(a, 2.0)
        assert tr.live_bytes >= 1600
    assert tr.peak_bytes >= 1600
    del a, b
    with pytest.raises(CapacityError):
        with track_allocations(cap_bytes=1000):
            T(np.ones(1000))
