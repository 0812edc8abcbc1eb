import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lrnrl import diffmath as dm
from lrnrl.diffmath import Tensor

from .gradcheck import finite_difference, max_rel_error

F64 = np.float64


def p64(x):
    return dm.parameter(np.asarray(x, dtype=F64), dtype=F64)


def grads_of(fn, params):
    with dm.Tape() as tape:
        loss = fn()
    return dm.backward(tape, loss, params)


def check_grad(fn, params, tol=1e-6):
    ana = grads_of(fn, params)
    num = finite_difference(lambda: fn().item(), params)
    assert max_rel_error(ana, num) <= tol


# matmul ---------------------------------------------------------------------

def test_matmul_identity():
    out = dm.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_hand_arithmetic():
    out = dm.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(dm.ContractError):
        dm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_is_row_sums_of_b():
    rng = np.random.default_rng(0)
    A = p64(rng.standard_normal((3, 4)))
    B = p64(rng.standard_normal((4, 5)))
    gA, gB = grads_of(lambda: dm.reduce_sum(dm.matmul(A, B)), [A, B])
    np.testing.assert_allclose(gA, np.broadcast_to(B.data.sum(axis=1), (3, 4)))
    check_grad(lambda: dm.reduce_sum(dm.matmul(A, B)), [A, B])


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    A = p64(rng.standard_normal((2, 3, 4)))
    B = p64(rng.standard_normal((2, 4, 3)))
    W = p64(rng.standard_normal((3, 2)))
    check_grad(lambda: dm.reduce_sum(dm.tanh(dm.matmul(dm.matmul(A, B), W))), [A, B, W])


# elementwise ----------------------------------------------------------------------

def test_tanh_relu_values():
    assert dm.tanh(Tensor(0.0)).item() == 0.0
    assert dm.relu(Tensor(-3.0)).item() == 0.0
    assert dm.elementwise("relu", Tensor(2.0)).item() == 2.0


def test_tanh_derivative_at_zero():
    x = p64([0.0])
    (g,) = grads_of(lambda: dm.reduce_sum(dm.tanh(x)), [x])
    assert g[0] == pytest.approx(1.0)
    num = finite_difference(lambda: dm.reduce_sum(dm.tanh(x)).item(), [x])
    assert num[0][2] == pytest.approx(1.0, rel=1e-8)


def test_log_domain_error():
    with pytest.raises(dm.DomainError):
        dm.log(Tensor([1.0, 0.0]))
    with pytest.raises(dm.DomainError):
        dm.log(Tensor([-2.0]))


def test_elementwise_shape_mismatch():
    with pytest.raises(dm.ContractError):
        dm.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(dm.ContractError):
        dm.elementwise("sigmoid", Tensor(1.0))


def test_elementwise_gradients():
    rng = np.random.default_rng(2)
    x = p64(rng.uniform(0.5, 2.0, (3, 4)))
    y = p64(rng.standard_normal((3, 4)))
    b = p64(rng.standard_normal(4))
    check_grad(lambda: dm.reduce_sum(dm.exp(dm.tanh(x * y + b)) / x - dm.log(x) * dm.relu(y)), [x, y, b])


def test_clip_minimum_gradients():
    x = p64([-2.0, 0.3, 2.0])
    y = p64([0.0, 1.0, 0.5])
    gx, gy = grads_of(lambda: dm.reduce_sum(dm.minimum(dm.clip(x, -1.0, 1.0), y)), [x, y])
    np.testing.assert_array_equal(gx, [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(gy, [0.0, 0.0, 1.0])


# softmax / layer norm / sum_rows ------------------------------------------------------

def test_softmax_rows_examples():
    out = dm.softmax_rows(Tensor([[0.0, 0.0], [1000.0, 1000.0], [0.0, math.log(3.0)]], dtype=F64)).data
    np.testing.assert_allclose(out, [[0.5, 0.5], [0.5, 0.5], [0.25, 0.75]], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(F64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = dm.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_gradient():
    x = p64(np.random.default_rng(3).standard_normal((2, 4)))
    w = np.random.default_rng(4).standard_normal((2, 4))
    check_grad(lambda: dm.reduce_sum(dm.softmax_rows(x) * w), [x])


def test_layer_norm_examples():
    np.testing.assert_array_equal(dm.layer_norm(Tensor([5.0, 5.0, 5.0]), 1e-5).data, [0.0, 0.0, 0.0])
    out = dm.layer_norm(Tensor([1.0, 2.0, 3.0], dtype=F64), 1e-5).data
    np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(F64, 16, elements=st.floats(-10, 10)))
def test_layer_norm_moments(x):
    out = dm.layer_norm(Tensor(x), 1e-5).data
    assert abs(out.mean()) <= 1e-6
    if x.var() > 0.1:
        assert abs(out.var() - 1.0) <= 1e-4


def test_layer_norm_gradient():
    x = p64(np.random.default_rng(5).standard_normal((3, 6)))
    w = np.random.default_rng(6).standard_normal((3, 6))
    check_grad(lambda: dm.reduce_sum(dm.layer_norm(x) * w), [x])


def test_sum_rows():
    np.testing.assert_array_equal(dm.sum_rows(Tensor([[1.0, 2.0], [3.0, 4.0]])).data, [4.0, 6.0])
    np.testing.assert_array_equal(dm.sum_rows(Tensor([[7.0, 8.0]])).data, [7.0, 8.0])


def test_sum_rows_gradient_broadcasts_upstream():
    x = p64(np.random.default_rng(7).standard_normal((4, 3)))
    up = np.array([1.0, -2.0, 0.5])
    (g,) = grads_of(lambda: dm.reduce_sum(dm.sum_rows(x) * up), [x])
    np.testing.assert_array_equal(g, np.broadcast_to(up, (4, 3)))
    check_grad(lambda: dm.reduce_sum(dm.sum_rows(x) * up), [x])


def test_shape_ops_gradients():
    rng = np.random.default_rng(8)
    x = p64(rng.standard_normal((2, 3, 4)))
    g = p64(rng.standard_normal((2, 4)))

    def f():
        gb = dm.broadcast_to(dm.reshape(g, (2, 1, 4)), (2, 3, 4))
        cat = dm.concat([x, gb], axis=-1)
        sw = dm.swapaxes(cat, 1, 2)
        return dm.reduce_sum(dm.tanh(sw) * dm.index(sw, (slice(None), slice(None), [2, 0, 1])))

    check_grad(f, [x, g])


# backward -----------------------------------------------------------------------------

def test_backward_identity_and_square():
    p = p64([3.0])
    (g,) = grads_of(lambda: dm.reduce_sum(p), [p])
    assert g[0] == 1.0
    (g,) = grads_of(lambda: dm.reduce_sum(p * p), [p])
    assert g[0] == 6.0


def test_backward_unused_parameter_is_zero():
    p, q = p64([1.0, 2.0]), p64([[5.0]])
    gp, gq = grads_of(lambda: dm.reduce_sum(p * 2.0), [p, q])
    np.testing.assert_array_equal(gq, [[0.0]])
    np.testing.assert_array_equal(gp, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    p = p64([1.0, 2.0])
    with dm.Tape() as tape:
        y = p * 2.0
    with pytest.raises(dm.ContractError):
        dm.backward(tape, y, [p])


def test_no_tape_records_nothing():
    p = p64([1.0])
    y = p * 3.0
    assert not y.requires_grad


def test_float32_is_default_and_preserved():
    p = dm.parameter([1.0, 2.0])
    assert p.dtype == np.float32
    assert (dm.tanh(p) * 2.0 + 1.0).dtype == np.float32


def test_backward_is_deterministic():
    rng = np.random.default_rng(9)
    A = dm.parameter(rng.standard_normal((8, 8)))
    x = Tensor(rng.standard_normal((5, 8)).astype(np.float32))

    def run():
        return grads_of(lambda: dm.reduce_sum(dm.layer_norm(dm.tanh(dm.matmul(x, A)))), [A])[0]

    assert run().tobytes() == run().tobytes()


# clipping and Adam -------------------------------------------------------------------------

def test_clip_global_norm():
    out, norm = dm.clip_global_norm([np.array([3.0, 4.0])], 0.5)
    assert norm == 5.0
    np.testing.assert_allclose(out[0], [0.3, 0.4])
    out, _ = dm.clip_global_norm([np.array([0.1, 0.1])], 0.5)
    np.testing.assert_array_equal(out[0], [0.1, 0.1])


@settings(max_examples=50, deadline=None)
@given(st.lists(hnp.arrays(F64, 3, elements=st.floats(-1e3, 1e3)), min_size=1, max_size=4),
       st.floats(1e-3, 10.0))
def test_clip_global_norm_bound(grads, max_norm):
    out, _ = dm.clip_global_norm(grads, max_norm)
    assert dm.global_norm(out) <= max_norm + 1e-7


def test_adam_zero_lr_leaves_params():
    p = dm.parameter([1.0, -2.0])
    state = dm.AdamState.zeros_like([p])
    dm.adam_step([p], [np.array([0.3, 0.1], np.float32)], state, 0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step():
    # m_hat = 1, v_hat = 1 on the first step, so the update is lr / (1 + eps)
    p = p64([0.0])
    state = dm.AdamState.zeros_like([p])
    dm.adam_step([p], [np.array([1.0])], state, 1e-3)
    assert p.data[0] == pytest.approx(-1e-3 / (1.0 + 1e-8), rel=1e-12)
    assert p.data[0] == pytest.approx(-9.99999e-4, rel=1e-5)


def test_adam_deterministic():
    def run():
        p = dm.parameter(np.linspace(-1, 1, 6))
        opt = dm.Adam([p])
        for k in range(5):
            opt.step([np.sin(np.arange(6) + k).astype(np.float32)], 1e-2)
        return p.data.tobytes()

    assert run() == run()
