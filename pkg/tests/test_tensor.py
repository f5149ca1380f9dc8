"""Tape autodiff core: recording, backward, replay, serialization."""

import io

import numpy as np
import pytest

from deepkanseg import ops
from deepkanseg.tensor import (
    AutodiffError, Graph, GraphError, NonFiniteError, SerializationError,
    ShapeError, Tensor, eval_graph, load_tensor, read_tensor, save_tensor,
    write_tensor,
)


def test_add_mul_backward_chain(f64):
    x = Tensor([2.0, 3.0], requires_grad=True)
    y = Tensor([4.0, 5.0], requires_grad=True)
    with Graph() as g:
        z = ops.reduce_sum(ops.mul(ops.add(x, y), y))  # sum((x+y)*y)
    g.backward(z)
    np.testing.assert_allclose(x.grad, [4.0, 5.0])
    np.testing.assert_allclose(y.grad, [10.0, 13.0])  # x + 2y


def test_fanout_gradients_accumulate(f64):
    # y = x*x + x: the same leaf feeds two ops, grads must add.
    x = Tensor([1.5, -0.5], requires_grad=True)
    with Graph() as g:
        y = ops.reduce_sum(ops.add(ops.mul(x, x), x))
    g.backward(y)
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0)


def test_matmul_matches_triple_loop(f64, rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    out = ops.matmul(Tensor(a), Tensor(b)).numpy()
    ref = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_random_graph_matches_finite_difference(f64, rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)

    def fn(xv, wv):
        h = ops.relu(ops.matmul(xv, wv))
        s = ops.sigmoid(ops.sub(h, ops.mul(xv, xv)))
        return ops.reduce_sum(ops.mul(s, ops.softmax(h, axis=-1)))

    with Graph() as g:
        loss = fn(x, w)
    g.backward(loss)
    eps = 1e-6
    for t in (x, w):
        flat = t.data.reshape(-1)
        ana = t.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(x, w).data)
            flat[i] = orig - eps
            fm = float(fn(x, w).data)
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            assert abs(ana[i] - fd) / max(abs(ana[i]), abs(fd), 1e-6) < 1e-6


def test_broadcast_add_backward(f64, rng):
    a = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    with Graph() as g:
        out = ops.reduce_sum(ops.mul(ops.add(a, b), ops.add(a, b)))
    g.backward(out)
    full = 2.0 * (a.data + b.data)
    np.testing.assert_allclose(a.grad, full.sum(axis=1, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(b.grad, full.sum(axis=0, keepdims=True), atol=1e-12)


def test_relu_and_softmax_known_values():
    x = Tensor([[-1.0, 0.0, 2.0]])
    np.testing.assert_allclose(ops.relu(x).numpy(), [[0.0, 0.0, 2.0]])
    s = ops.softmax(Tensor([[0.0, 0.0], [1.0, 1.0]]), axis=-1).numpy()
    np.testing.assert_allclose(s, 0.5 * np.ones((2, 2)), atol=1e-7)


def test_softmax_rows_sum_to_one(rng):
    x = Tensor(rng.normal(scale=5.0, size=(4, 7)))
    s = ops.softmax(x, axis=-1).numpy()
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(4), atol=1e-6)


def test_ops_run_eagerly_outside_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ops.mul(x, x)
    assert not y.requires_grad
    assert x.grad is None


def test_backward_before_forward_raises():
    g = Graph()
    with pytest.raises(GraphError):
        g.backward(Tensor([1.0]))


def test_nonfinite_result_raises_inside_graph():
    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteError):
            with Graph():
                ops.div(Tensor([1.0]), Tensor([0.0]))


def test_mixed_dtype_operands_raise():
    a = Tensor(np.ones(3, dtype=np.float32))
    b = Tensor(np.ones(3, dtype=np.float64))
    with pytest.raises(AutodiffError):
        ops.add(a, b)


def test_capture_replay_bit_identical(f64, rng):
    x = Tensor(rng.normal(size=(3, 3)))
    w = Tensor(rng.normal(size=(3, 2)))

    def fn(x, w):
        return ops.softmax(ops.matmul(ops.relu(x), w), axis=-1)

    g = Graph.capture(fn, {"x": x, "w": w})
    direct = fn(x, w).numpy()
    again = g.replay({"x": x, "w": w})["out"].numpy()
    assert np.array_equal(direct, again)
    x2 = Tensor(rng.normal(size=(3, 3)))
    w2 = Tensor(rng.normal(size=(3, 2)))
    np.testing.assert_array_equal(g.replay({"x": x2, "w": w2})["out"].numpy(),
                                  fn(x2, w2).numpy())


def test_replay_rejects_wrong_inputs(f64, rng):
    x = Tensor(rng.normal(size=(2, 2)))
    g = Graph.capture(lambda x: ops.relu(x), {"x": x})
    with pytest.raises(GraphError):
        g.replay({"y": x})
    with pytest.raises(ShapeError):
        g.replay({"x": Tensor(np.zeros((3, 3)))})


def test_eval_graph_names_failing_node(f64):
    x = Tensor(np.array([1.0]))
    g = Graph.capture(lambda x: ops.div(ops.relu(x), x), {"x": x})
    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteError, match=r"node \d+ \(div\)"):
            eval_graph({"x": Tensor(np.array([0.0]))}, g)


def test_second_backward_accumulates(f64):
    x = Tensor([3.0], requires_grad=True)
    with Graph() as g:
        y = ops.mul(x, x)
    g.backward(y)
    first = x.grad.copy()
    g.backward(y)
    np.testing.assert_allclose(x.grad, 2.0 * first)


@pytest.mark.parametrize("shape,dtype", [
    ((), np.float32), ((1,), np.float64), ((3, 2), np.float32),
    ((2, 1, 4), np.float64),
])
def test_tensor_serialization_roundtrip(shape, dtype, rng):
    arr = rng.normal(size=shape).astype(dtype)
    buf = io.BytesIO()
    write_tensor(buf, arr)
    buf.seek(0)
    back = read_tensor(buf)
    assert back.shape == arr.shape and back.dtype == arr.dtype
    assert np.array_equal(back, arr)


def test_tensor_serialization_rejects_bad_magic():
    with pytest.raises(SerializationError):
        read_tensor(io.BytesIO(b"NOPE" + b"\x00" * 16))


def test_tensor_serialization_rejects_truncation(rng):
    buf = io.BytesIO()
    write_tensor(buf, rng.normal(size=(4, 4)).astype(np.float32))
    blob = buf.getvalue()
    for cut in (3, 5, 10, len(blob) - 1):
        with pytest.raises(SerializationError):
            read_tensor(io.BytesIO(blob[:cut]))


def test_tensor_serialization_rejects_integer_dtype():
    with pytest.raises(SerializationError):
        write_tensor(io.BytesIO(), np.arange(4))


def test_tensor_file_helpers(tmp_path, rng):
    arr = rng.normal(size=(5,)).astype(np.float32)
    path = tmp_path / "t.ktsr"
    save_tensor(path, arr)
    assert np.array_equal(load_tensor(path), arr)


def test_operator_sugar_matches_ops(f64, rng):
    a = Tensor(rng.normal(size=(2, 2)))
    b = Tensor(rng.normal(size=(2, 2)))
    np.testing.assert_array_equal((a + b).numpy(), ops.add(a, b).numpy())
    np.testing.assert_array_equal((a - b).numpy(), ops.sub(a, b).numpy())
    np.testing.assert_array_equal((a * 2.0).numpy(), (2.0 * a).numpy())
    np.testing.assert_array_equal((a @ b).numpy(), ops.matmul(a, b).numpy())
    np.testing.assert_array_equal((-a).numpy(), ops.neg(a).numpy())
