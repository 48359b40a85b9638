"""Engine-level tests: tape semantics, ops, optimizer, RNG, serialization."""

import numpy as np
import pytest

from roadflow import tensor as T
from roadflow.tensor import Adam, Tensor, TensorFormatError


def test_create_fill_values_and_mismatch():
    assert np.array_equal(T.create((2, 2), 0.0).data, np.zeros((2, 2)))
    assert np.array_equal(T.create((3,), [1.0, 2.0, 3.0]).data, [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        T.create((2,), [1.0, 2.0, 3.0])
    assert T.create((2, 2), 1.0).grad is None


def test_matmul_hand_example():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[5.0], [6.0]]))
    out = T.matmul(a, b)
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_elementwise_ops_require_same_shape():
    a = Tensor(np.ones((2, 3)))
    for op in (T.add, T.sub, T.mul):
        with pytest.raises(ValueError):
            op(a, Tensor(np.ones((3, 2))))


def test_mul_hand_example():
    out = T.mul(Tensor(np.array([1.0, 2.0, 3.0])),
                Tensor(np.array([4.0, 5.0, 6.0])))
    assert np.array_equal(out.data, [4.0, 10.0, 18.0])


def test_softmax_hand_example():
    x = Tensor(np.log(np.array([[1.0, 2.0]])))
    y = T.softmax(x)
    assert np.allclose(y.data, [[1 / 3, 2 / 3]], atol=1e-15)
    assert np.allclose(y.data.sum(axis=-1), 1.0)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(0, 1, (4, 6))
    a = T.softmax(Tensor(x)).data
    b = T.softmax(Tensor(x + 1000.0)).data
    assert np.allclose(a, b, atol=1e-12)


def test_backward_simple_chain():
    x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
    y = T.reduce_sum(T.mul(x, x))
    T.backward(y)
    assert np.allclose(x.grad, [4.0, -6.0])


def test_backward_accumulates_across_reuse():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = T.add(x, x)
    T.backward(T.reduce_sum(y))
    assert np.allclose(x.grad, [2.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.mul(x, x)
    with pytest.raises(ValueError):
        T.backward(y)
    T.active_tape().clear()


def test_backward_detached_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    _ = T.reduce_sum(T.mul(x, x))  # left on the tape
    loose = Tensor(np.array(1.0))
    with pytest.raises(ValueError):
        T.backward(loose)
    T.active_tape().clear()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.reduce_sum(T.mul(x, x))
    assert len(T.active_tape()) == 0
    assert float(y.data) == 3.0


def test_tape_cleared_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    T.backward(T.reduce_sum(T.mul(x, x)))
    assert len(T.active_tape()) == 0


def test_add_bias_grad_sums_leading_axes():
    x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    T.backward(T.reduce_sum(T.add_bias(x, b)))
    assert np.allclose(b.grad, np.full(4, 6.0))
    assert np.allclose(x.grad, np.ones((2, 3, 4)))


def test_relu_masks_gradient():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    T.backward(T.reduce_sum(T.relu(x)))
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_concat_splits_gradient():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 3)), requires_grad=True)
    out = T.concat([a, b], axis=1)
    assert out.shape == (2, 5)
    T.backward(T.reduce_sum(T.mul(out, Tensor(np.arange(10.0).reshape(2, 5)))))
    assert np.array_equal(a.grad, [[0.0, 1.0], [5.0, 6.0]])
    assert np.array_equal(b.grad, [[2.0, 3.0, 4.0], [7.0, 8.0, 9.0]])


def test_tile_gradient_sums_copies():
    x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    y = T.tile(x, (3, 1))
    T.backward(T.reduce_sum(y))
    assert np.array_equal(x.grad, [[3.0, 3.0]])


def test_transpose_roundtrip_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    w = np.arange(6.0).reshape(3, 2)
    T.backward(T.reduce_sum(T.mul(T.transpose(x), Tensor(w))))
    assert np.array_equal(x.grad, w.T)


def test_reduce_sum_keepdims_gradient():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    y = T.reduce_sum(x, axes=(1,), keepdims=True)
    assert y.shape == (2, 1)
    T.backward(T.reduce_sum(y))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_operator_sugar_matches_functions():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    out = (a + b) * b - a
    assert np.allclose(out.data, [11.0, 22.0])
    T.backward(T.reduce_sum(out))
    assert np.allclose(a.grad, [2.0, 3.0])   # d/da (a+b)*b - a = b - 1
    assert np.allclose(b.grad, [7.0, 10.0])  # d/db = a + 2b


def test_scalar_division_and_negation():
    a = Tensor(np.array([2.0, 4.0]), requires_grad=True)
    out = -(a / 2.0)
    T.backward(T.reduce_sum(out))
    assert np.allclose(out.data, [-1.0, -2.0])
    assert np.allclose(a.grad, [-0.5, -0.5])


# --------------------------------------------------------------------------
# Adam

def test_adam_first_step_magnitude():
    # with bias correction the first update is lr * g / (|g| + eps)
    p = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    p.grad = np.array([0.5, -2.0])
    Adam([p], lr=0.1).step()
    assert np.allclose(p.data, [1.0 - 0.1, 1.0 + 0.1], atol=1e-6)


def test_adam_converges_on_quadratic():
    p = Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(400):
        p.grad = 2.0 * (p.data - 3.0)
        opt.step()
    assert abs(p.data[0] - 3.0) < 1e-3


def test_adam_skips_unused_parameters():
    p = Tensor(np.array([1.0]), requires_grad=True)
    q = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([1.0])
    Adam([p, q], lr=0.5).step()
    assert q.data[0] == 2.0
    assert p.data[0] != 1.0


def test_adam_clears_grads_and_rejects_bad_lr():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    opt = Adam([p], lr=0.1)
    opt.step()
    assert p.grad is None
    with pytest.raises(ValueError):
        Adam([p], lr=0.0)


# --------------------------------------------------------------------------
# RNG and init

def test_make_rng_streams_are_independent_and_stable():
    a = T.make_rng(7, 0).uniform(size=4)
    b = T.make_rng(7, 0).uniform(size=4)
    c = T.make_rng(7, 1).uniform(size=4)
    d = T.make_rng(8, 0).uniform(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_make_rng_normal_moments():
    draws = T.make_rng(0, 2).normal(0.0, 1.0, 100_000)
    assert abs(draws.mean()) < 0.01
    assert abs(draws.std() - 1.0) < 0.01


def test_xavier_bounds_and_determinism():
    t1 = T.xavier_init((200, 50), fan_in=200, fan_out=50, rng=T.make_rng(1, 0))
    t2 = T.xavier_init((200, 50), fan_in=200, fan_out=50, rng=T.make_rng(1, 0))
    bound = np.sqrt(6.0 / 250.0)
    assert np.array_equal(t1.data, t2.data)
    assert np.abs(t1.data).max() <= bound
    assert t1.requires_grad
    with pytest.raises(ValueError):
        T.xavier_init((2, 2), fan_in=0, fan_out=4, rng=0)


# --------------------------------------------------------------------------
# Tensor file format

def test_tensor_file_roundtrip_is_f32_quantization(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.normal(0, 1, (3, 4, 5))
    path = tmp_path / "t.rtfm"
    T.write_tensor(path, arr)
    back = T.read_tensor(path)
    assert back.shape == arr.shape
    assert np.array_equal(back, arr.astype(np.float32).astype(np.float64))


def test_tensor_file_second_cycle_bit_stable(tmp_path):
    rng = np.random.default_rng(1)
    arr = rng.normal(0, 1, (6, 2))
    p1, p2 = tmp_path / "a.rtfm", tmp_path / "b.rtfm"
    T.write_tensor(p1, arr)
    once = T.read_tensor(p1)
    T.write_tensor(p2, once)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(T.read_tensor(p2), once)


def test_tensor_file_header_layout(tmp_path):
    path = tmp_path / "t.rtfm"
    T.write_tensor(path, np.zeros((2, 3)))
    raw = path.read_bytes()
    assert raw[:4] == b"RTFM"
    assert raw[4:6] == (1).to_bytes(2, "little")
    assert raw[6:8] == (2).to_bytes(2, "little")
    assert raw[8:12] == (2).to_bytes(4, "little")
    assert raw[12:16] == (3).to_bytes(4, "little")
    assert len(raw) == 16 + 4 * 6


def test_tensor_file_rejects_corruption(tmp_path):
    path = tmp_path / "t.rtfm"
    T.write_tensor(path, np.ones((2, 2)))
    raw = bytearray(path.read_bytes())

    bad = tmp_path / "bad.rtfm"
    bad.write_bytes(b"JUNK" + bytes(raw[4:]))
    with pytest.raises(TensorFormatError):
        T.read_tensor(bad)

    bad.write_bytes(bytes(raw[:4]) + (9).to_bytes(2, "little") + bytes(raw[6:]))
    with pytest.raises(TensorFormatError):
        T.read_tensor(bad)

    bad.write_bytes(bytes(raw[:-3]))  # truncated payload
    with pytest.raises(TensorFormatError):
        T.read_tensor(bad)

    bad.write_bytes(bytes(raw[:6]))  # truncated header
    with pytest.raises(TensorFormatError):
        T.read_tensor(bad)
