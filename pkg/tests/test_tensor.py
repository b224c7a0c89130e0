import math

from hypothesis import given, strategies as st
import numpy as np
import pytest

from blrp import tensor as T
from blrp.errors import DimensionError, MaskError, RankError

import oracles


def fd_check(fn, arrays, h=1e-5, tol=1e-6):
    """Compare tape gradients of scalar ``fn(*tensors)`` with central differences."""
    ts = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = fn(*ts)
    grads = tape.backward(loss, ts)
    for t, g in zip(ts, grads):
        num = np.zeros_like(t.data)
        for idx in np.ndindex(t.shape):
            old = t.data[idx]
            t.data[idx] = old + h
            up = fn(*ts).item()
            t.data[idx] = old - h
            dn = fn(*ts).item()
            t.data[idx] = old
            num[idx] = (up - dn) / (2 * h)
        scale = max(1.0, np.abs(num).max())
        assert np.abs(g - num).max() / scale < tol


def weighted(y, w):
    return T.total(T.mul(y, T.Tensor(w)))


# -- forward values -------------------------------------------------------

def test_matmul_matches_scalar_loops(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    np.testing.assert_allclose(got, oracles.matmul(a.tolist(), b.tolist()), atol=1e-12)


def test_matmul_identity_and_shape_error():
    a = T.Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(T.matmul(a, T.Tensor(np.eye(3))).data, a.data)
    with pytest.raises(DimensionError):
        T.matmul(a, T.Tensor(np.ones((2, 2))))


def test_matmul_batched_with_shared_weight(rng):
    a, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    got = T.matmul(T.Tensor(a), T.Tensor(w)).data
    np.testing.assert_allclose(got, np.einsum("bij,jk->bik", a, w), atol=1e-12)


def test_softmax_examples():
    y = T.softmax_rows(T.Tensor([[0.0, 0.0]])).data
    np.testing.assert_allclose(y, [[0.5, 0.5]])
    y = T.softmax_rows(T.Tensor([[1.0, 2.0, 3.0]]), np.array([True, False, True])).data
    assert y[0, 1] == 0.0
    np.testing.assert_allclose(y[0, [0, 2]], np.exp([1, 3]) / np.exp([1, 3]).sum())
    # huge logits stay finite
    y = T.softmax_rows(T.Tensor([[1000.0, 1000.0]])).data
    np.testing.assert_allclose(y, [[0.5, 0.5]])


def test_softmax_fully_masked_row_raises():
    with pytest.raises(MaskError):
        T.softmax_rows(T.Tensor([[1.0, 2.0]]), np.array([False, False]))


def test_softmax_bad_mask_shape():
    with pytest.raises(DimensionError):
        T.softmax_rows(T.Tensor(np.zeros((2, 3))), np.ones(4, dtype=bool))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=9))
def test_softmax_rows_sum_to_one(row):
    y = T.softmax_rows(T.Tensor([row])).data
    assert abs(y.sum() - 1.0) < 1e-12
    assert (y >= 0).all()
    np.testing.assert_allclose(y[0], oracles.softmax(row), atol=1e-12)


def test_layer_norm_examples(rng):
    x = rng.normal(size=(4, 6))
    y = T.layer_norm_rows(T.Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-9)
    g, b = rng.normal(size=6), rng.normal(size=6)
    y = T.layer_norm_rows(T.Tensor(x), T.Tensor(g), T.Tensor(b)).data
    np.testing.assert_allclose(y, oracles.layer_norm(x.tolist(), g, b), atol=1e-12)


def test_layer_norm_constant_row_is_finite():
    y = T.layer_norm_rows(T.Tensor(np.full((1, 4), 3.0))).data
    assert np.isfinite(y).all()
    np.testing.assert_allclose(y, 0.0)


def test_gelu_values():
    y = T.gelu(T.Tensor([[-1.0, 0.0, 2.0]])).data[0]
    np.testing.assert_allclose(y, [oracles.gelu(v) for v in (-1.0, 0.0, 2.0)], atol=1e-15)


def test_cross_entropy_uniform_is_log_c():
    for c in (2, 10, 37):
        loss = T.cross_entropy(T.Tensor(np.zeros((3, c))), [0, 1, c - 1]).item()
        assert abs(loss - math.log(c)) < 1e-12


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(DimensionError):
        T.cross_entropy(T.Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(DimensionError):
        T.cross_entropy(T.Tensor(np.zeros((2, 3))), [0])


def test_split_merge_heads_round_trip(rng):
    x = rng.normal(size=(2, 5, 6))
    s = T.split_heads(T.Tensor(x), 3)
    assert s.shape == (2, 3, 5, 2)
    np.testing.assert_array_equal(T.merge_heads(s).data, x)
    with pytest.raises(DimensionError):
        T.split_heads(T.Tensor(x), 4)


def test_concat_and_slice_rows(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    c = T.concat_rows([T.Tensor(a), T.Tensor(b)])
    np.testing.assert_array_equal(T.slice_rows(c, 2, 6).data, b)
    with pytest.raises(DimensionError):
        T.concat_rows([T.Tensor(a), T.Tensor(np.ones((2, 2)))])
    with pytest.raises(DimensionError):
        T.slice_rows(c, 3, 9)


# -- gradients against finite differences ---------------------------------

def test_grad_matmul(rng):
    w = rng.normal(size=(3, 5))
    fd_check(lambda a, b: weighted(T.matmul(a, b), w), [rng.normal(size=(3, 4)), rng.normal(size=(4, 5))])


def test_grad_matmul_transpose_b_batched(rng):
    w = rng.normal(size=(2, 3, 4))
    fd_check(lambda a, b: weighted(T.matmul(a, b, transpose_b=True), w),
             [rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 4, 5))])


def test_grad_matmul_shared_weight(rng):
    w = rng.normal(size=(2, 3, 4))
    fd_check(lambda a, b: weighted(T.matmul(a, b), w),
             [rng.normal(size=(2, 3, 5)), rng.normal(size=(5, 4))])


def test_grad_add_mul_broadcast(rng):
    w = rng.normal(size=(2, 3, 4))
    fd_check(lambda a, b, c: weighted(T.mul(T.add(a, b), c), w),
             [rng.normal(size=(2, 3, 4)), rng.normal(size=(4,)), rng.normal(size=(3, 4))])


def test_grad_softmax_masked(rng):
    mask = np.array([[True, False, True, True], [True, True, False, True]])
    w = rng.normal(size=(2, 4))
    fd_check(lambda a: weighted(T.softmax_rows(a, mask), w), [rng.normal(size=(2, 4))])


def test_grad_layer_norm(rng):
    w = rng.normal(size=(3, 5))
    fd_check(lambda a, g, b: weighted(T.layer_norm_rows(a, g, b), w),
             [rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)])


def test_grad_gelu(rng):
    w = rng.normal(size=(3, 4))
    fd_check(lambda a: weighted(T.gelu(a), w), [rng.normal(size=(3, 4))])


def test_grad_cross_entropy(rng):
    fd_check(lambda z: T.cross_entropy(z, [1, 0, 2]), [rng.normal(size=(3, 4))])


def test_grad_structural_ops(rng):
    w = rng.normal(size=(2, 1, 3))

    def fn(a, b):
        c = T.concat_rows([a, T.expand_batch(b, 2)])
        s = T.slice_rows(c, 1, 5)
        h = T.merge_heads(T.split_heads(T.transpose(T.transpose(s)), 3))
        return weighted(T.mean_rows(h), w)

    fd_check(fn, [rng.normal(size=(2, 3, 3)), rng.normal(size=(4, 3))])


def test_grad_embedding_repeated_ids(rng):
    ids = np.array([[0, 2, 2], [1, 0, 2]])
    w = rng.normal(size=(2, 3, 4))
    fd_check(lambda t: weighted(T.embedding(t, ids), w), [rng.normal(size=(3, 4))])


def test_grad_squeeze_and_scale(rng):
    w = rng.normal(size=(3, 2))
    fd_check(lambda a: weighted(T.scale(T.squeeze_batch(a), -2.5), w), [rng.normal(size=(1, 3, 2))])


def test_grad_reused_tensor_accumulates(rng):
    fd_check(lambda a: T.total(T.mul(a, a)), [rng.normal(size=(2, 2))])


# -- tape mechanics --------------------------------------------------------

def test_backward_needs_scalar():
    a = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with T.Tape() as tape:
        y = T.scale(a, 2.0)
    with pytest.raises(RankError):
        tape.backward(y, [a])


def test_unused_param_gets_zero_grad():
    a = T.Tensor(np.ones(3), requires_grad=True)
    b = T.Tensor(np.ones(2), requires_grad=True)
    with T.Tape() as tape:
        loss = T.total(T.scale(a, 3.0))
    grads = tape.backward(loss, {"a": a, "b": b})
    np.testing.assert_array_equal(grads["a"], [3, 3, 3])
    np.testing.assert_array_equal(grads["b"], [0, 0])


def test_no_recording_outside_tape_or_without_grad():
    a = T.Tensor(np.ones(2), requires_grad=True)
    y = T.scale(a, 2.0)
    assert y.node is None
    with T.Tape() as tape:
        z = T.scale(T.Tensor(np.ones(2)), 2.0)
        with T.no_tape():
            w = T.scale(a, 2.0)
    assert z.node is None and w.node is None and tape.nodes == []


def test_module_backward_function():
    a = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with T.Tape():
        loss = T.total(T.mul(a, T.Tensor([3.0, 4.0])))
    (g,) = T.backward(loss, [a])
    np.testing.assert_array_equal(g, [3.0, 4.0])


def test_memory_tracker_returns_to_baseline():
    base = T.TRACKER.live
    a = T.Tensor(np.ones((10, 10)), requires_grad=True)
    assert T.TRACKER.live == base + 800
    with T.Tape() as tape:
        loss = T.total(T.matmul(a, a))
    tape.backward(loss, [a])
    del loss, tape, a
    assert T.TRACKER.live == base
    assert T.TRACKER.peak >= base + 800


def test_operator_sugar(rng):
    a, b = T.Tensor(rng.normal(size=(2, 2))), T.Tensor(rng.normal(size=(2, 2)))
    np.testing.assert_allclose((a + b).data, a.data + b.data)
    np.testing.assert_allclose((a * b).data, a.data * b.data)
    np.testing.assert_allclose((2 * a).data, 2 * a.data)
    np.testing.assert_allclose((a @ b).data, a.data @ b.data)
