import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlin import tensor as T
from mlin.tensor import DimensionError, Tape, Tensor
from oracle import numeric_grad, rel_err


def check_grads(fn, *arrays, seed=0):
    """Compare tape gradients of sum(fn(*xs) * w) with central differences for every input."""
    rng = np.random.default_rng(seed)
    xs = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*xs)
    w = rng.uniform(-1, 1, size=out.shape)

    def objective():
        return float(np.sum(fn(*[Tensor(x.data) for x in xs]).data * w))

    with Tape() as tape:
        out = fn(*xs)
    tape.backward(out, seed=w)
    return [rel_err(x.grad, numeric_grad(objective, x.data)) for x in xs]


def rand(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


def test_matmul_examples():
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(X)).data, X)
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    assert np.array_equal(out.data, [[3], [7]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad():
    rng = np.random.default_rng(1)
    assert max(check_grads(T.matmul, rand(rng, 3, 4), rand(rng, 4, 2))) < 1e-6


def test_softmax_rows_examples():
    y = T.softmax_rows(Tensor([[0.0, 0.0, 0.0], [1000.0, 0.0, 0.0], [1.0, 2.0, 3.0]])).data
    assert np.allclose(y[0], 1 / 3, atol=1e-15)
    assert np.allclose(y[1], [1, 0, 0], atol=1e-12)
    assert np.allclose(y[2], [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_nan_raises():
    with pytest.raises(FloatingPointError):
        T.softmax_rows(Tensor([[0.0, np.nan]]))


def test_softmax_cols_examples():
    assert np.allclose(T.softmax_cols(Tensor([[0.0], [0.0]])).data, 0.5)
    x = np.random.default_rng(2).normal(size=(4, 3))
    via_rows = T.transpose(T.softmax_rows(T.transpose(Tensor(x)))).data
    assert np.allclose(T.softmax_cols(Tensor(x)).data, via_rows, atol=1e-15)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_softmax_is_stochastic(seed, p, q):
    x = np.random.default_rng(seed).normal(scale=20, size=(p, q))
    rows = T.softmax_rows(Tensor(x)).data
    cols = T.softmax_cols(Tensor(x)).data
    assert (rows >= 0).all() and (cols >= 0).all()
    assert np.abs(rows.sum(axis=1) - 1).max() < 1e-12
    assert np.abs(cols.sum(axis=0) - 1).max() < 1e-12


@pytest.mark.parametrize("fn", [T.softmax_rows, T.softmax_cols])
def test_softmax_grads(fn):
    rng = np.random.default_rng(3)
    assert check_grads(fn, rand(rng, 3, 5))[0] < 1e-6


def test_elementwise_examples():
    x = Tensor(np.random.default_rng(4).normal(size=(2, 3)))
    assert np.array_equal(T.elementwise(x, Tensor(np.ones((2, 3))), "mul").data, x.data)
    assert np.array_equal(T.elementwise(x, Tensor(np.zeros((2, 3))), "add").data, x.data)
    assert np.array_equal(T.elementwise(Tensor([[2, 3]]), Tensor([[4, 5]]), "mul").data, [[8, 15]])
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 3))))  # no broadcasting


@pytest.mark.parametrize("op", ["mul", "add"])
def test_elementwise_grads(op):
    rng = np.random.default_rng(5)
    errs = check_grads(lambda a, b: T.elementwise(a, b, op), rand(rng, 3, 4), rand(rng, 3, 4))
    assert max(errs) < 1e-6


def test_linear_examples():
    x = np.random.default_rng(6).normal(size=(3, 2))
    assert np.array_equal(T.linear(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2))).data, x)
    out = T.linear(Tensor([[1, 1]]), Tensor([[1, 0], [0, 1]]), Tensor([2, 3]))
    assert np.array_equal(out.data, [[3, 4]])
    with pytest.raises(DimensionError):
        T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


def test_linear_grads_including_batch_axis():
    rng = np.random.default_rng(7)
    assert max(check_grads(T.linear, rand(rng, 4, 3), rand(rng, 3, 2), rand(rng, 2))) < 1e-6
    assert max(check_grads(T.linear, rand(rng, 2, 4, 3), rand(rng, 3, 2), rand(rng, 2))) < 1e-6


def test_mean_rows_examples():
    assert np.array_equal(T.mean_rows(Tensor([[1.0, 2.0]])).data, [1.0, 2.0])
    assert np.array_equal(T.mean_rows(Tensor([[1, 3], [3, 5]])).data, [2, 4])
    assert check_grads(T.mean_rows, rand(np.random.default_rng(8), 4, 3))[0] < 1e-6


def test_empty_tensor_rejected():
    with pytest.raises(DimensionError):
        T.mean_rows(Tensor(np.zeros((0, 3))))


def test_layout_grads():
    rng = np.random.default_rng(9)
    assert check_grads(lambda x: T.reshape(x, (3, 4)), rand(rng, 2, 6))[0] < 1e-6
    assert check_grads(T.transpose, rand(rng, 2, 3, 4))[0] < 1e-6
    assert check_grads(lambda x: T.permute(x, (2, 0, 1)), rand(rng, 2, 3, 4))[0] < 1e-6
    assert check_grads(lambda x: T.take_rows(x, [0, 2, 2, 1, 0]), rand(rng, 3, 4))[0] < 1e-6
    assert max(check_grads(T.concat_cols, rand(rng, 3, 2), rand(rng, 3, 4))) < 1e-6
    assert check_grads(lambda x: T.scale(x, -2.5), rand(rng, 3, 2))[0] < 1e-6


def test_dropout():
    x = Tensor(np.random.default_rng(10).normal(size=(50, 40)))
    assert T.dropout(x, 0.0, None) is x
    assert T.dropout(x, 0.5, None, training=False) is x
    y = T.dropout(x, 0.25, np.random.default_rng(0)).data
    kept = y != 0
    assert np.allclose(y[kept], x.data[kept] / 0.75)
    assert abs(kept.mean() - 0.75) < 0.03
    with pytest.raises(ValueError):
        T.dropout(x, 0.1, None)
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, np.random.default_rng(0))


def test_dropout_grad_uses_same_mask():
    x = rand(np.random.default_rng(11), 3, 4)
    fn = lambda t: T.dropout(t, 0.3, np.random.default_rng(42))  # noqa: E731
    assert check_grads(fn, x)[0] < 1e-6


@pytest.mark.parametrize("C", [2, 3, 10])
def test_cross_entropy_uniform_is_log_c(C):
    assert abs(float(T.cross_entropy(Tensor(np.zeros(C)), C - 1).data) - math.log(C)) < 1e-12
    assert abs(float(T.cross_entropy(Tensor(np.zeros((4, C))), [0, 1, 0, 1]).data) - math.log(C)) < 1e-12


def test_cross_entropy_errors_and_limit():
    assert float(T.cross_entropy(Tensor([50.0, 0.0, 0.0]), 0).data) < 1e-20
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros(3)), 3)
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, -1])


def test_cross_entropy_grad():
    rng = np.random.default_rng(12)
    assert check_grads(lambda z: T.cross_entropy(z, 2), rand(rng, 5))[0] < 1e-6
    assert check_grads(lambda z: T.cross_entropy(z, [0, 3, 1]), rand(rng, 3, 4))[0] < 1e-6


def test_tensor_used_twice_accumulates_both_paths():
    rng = np.random.default_rng(13)
    a, w = rand(rng, 3, 3), rand(rng, 3, 3)

    def fn(x):
        return T.add(T.matmul(x, x), T.mul(x, Tensor(w)))

    assert check_grads(fn, a)[0] < 1e-6


def test_backward_is_deterministic():
    rng = np.random.default_rng(14)
    a, b = rand(rng, 4, 5), rand(rng, 5, 3)

    def run():
        x, y = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        with Tape() as tape:
            out = T.cross_entropy(T.softmax_rows(T.matmul(x, y)), [0, 1, 2, 0])
        tape.backward(out)
        return x.grad.tobytes() + y.grad.tobytes()

    assert run() == run()


def test_intermediates_receive_grads():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        h = T.scale(x, 3.0)
        out = T.cross_entropy(T.mean_rows(h), 0)
    tape.backward(out)
    assert h.grad is not None and x.grad is not None
    assert np.allclose(x.grad, 3.0 * h.grad)


def test_no_recording_without_tape_or_grad():
    x = Tensor(np.ones((2, 2)))
    with Tape() as tape:
        T.matmul(x, x)
    assert tape.nodes == []


def test_nonscalar_backward_needs_seed():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(DimensionError):
        tape.backward(y)
