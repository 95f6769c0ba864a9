import threading

import numpy as np
import pytest

from dgcwnet import tensor as T
from dgcwnet.exceptions import GraphError, NumericalError, ShapeError
from dgcwnet.tensor import Tensor

A = [[1.0, 2.0], [3.0, 4.0]]
B = [[5.0, 6.0], [7.0, 8.0]]


def leaf(values, dtype=None):
    return Tensor(values, requires_grad=True, dtype=dtype)


def test_tensor_is_read_only():
    t = Tensor(A)
    assert t.dtype == np.float64
    with pytest.raises(ValueError):
        t.data[0, 0] = 10.0


def test_precision_context():
    with T.precision("f32"):
        assert Tensor(A).dtype == np.float32
    assert Tensor(A).dtype == np.float64
    with pytest.raises(ValueError):
        T.set_precision("f16")


def test_matmul_hand_case():
    out = Tensor(A) @ Tensor(B)
    np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) @ Tensor(np.ones((3, 1)))


def test_broadcast_add_gradient():
    a = leaf(np.ones((2, 3)))
    b = leaf([1.0, 2.0, 3.0])
    with T.Graph():
        T.backward(T.reduce("sum", a + b, (0, 1)))
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


def test_incompatible_broadcast():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(2))


def test_divide_by_zero():
    with pytest.raises(NumericalError):
        Tensor([1.0]) / Tensor([0.0])
    out = T.elementwise("divide", Tensor([1.0]), Tensor([0.0]), eps=0.5)
    assert out.item() == 2.0


def test_sqrt_and_log_domain():
    with pytest.raises(NumericalError):
        T.elementwise("sqrt", Tensor([-1.0]))
    with pytest.raises(NumericalError):
        T.elementwise("log", Tensor([0.0]))


def test_shared_input_accumulates():
    x = leaf([3.0])
    with T.Graph():
        T.backward(T.reduce("sum", x * x + x, 0))
    np.testing.assert_array_equal(x.grad, [7.0])


def test_grad_only_on_leaves():
    x = leaf([1.0, 2.0])
    with T.Graph():
        y = x * 2.0
        T.backward(T.reduce("sum", y, 0))
    assert y.grad is None
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        T.backward(x * 2.0)


def test_backward_twice_accumulates():
    x = leaf([1.0])
    for _ in range(2):
        with T.Graph():
            T.backward(T.reduce("sum", x * 3.0, 0))
    np.testing.assert_array_equal(x.grad, [6.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.Graph() as g, T.no_grad():
        y = x * 2.0
    assert len(g) == 0
    assert not y.requires_grad


def test_graph_mixing_is_rejected():
    x = leaf([1.0])
    with T.Graph():
        y = x * 2.0
    with T.Graph():
        with pytest.raises(GraphError):
            y * 3.0


def test_graphs_are_thread_local():
    errors = []

    def work(seed):
        try:
            x = leaf(np.full(3, float(seed)))
            with T.Graph():
                T.backward(T.reduce("sum", x.square(), 0))
            np.testing.assert_array_equal(x.grad, np.full(3, 2.0 * seed))
        except AssertionError as e:
            errors.append(e)

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_reduce_max_splits_ties():
    x = leaf([[1.0, 3.0, 3.0]])
    with T.Graph():
        T.backward(T.reduce("max", x, 1).sum(0))
    np.testing.assert_array_equal(x.grad, [[0.0, 0.5, 0.5]])


def test_variance_is_population_variance():
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    assert T.reduce("variance", x, 1).item() == pytest.approx(1.25)


def test_variance_of_constant_is_zero():
    x = Tensor(np.full((2, 5), 1e8 + 0.1))
    out = T.reduce("variance", x, 1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out, [0.0, 0.0], atol=1e-12)


def test_softmax_rows_sum_to_one():
    s = T.softmax(Tensor([[1000.0, 1000.0], [0.0, np.log(3.0)]]), 1)
    np.testing.assert_allclose(s.data, [[0.5, 0.5], [0.25, 0.75]])


def test_axis_out_of_range():
    with pytest.raises(ShapeError):
        T.reduce("sum", Tensor(A), 2)


def test_permute_reshape_concat_flip():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(T.permute(x, (1, 0)).data, x.data.T)
    np.testing.assert_array_equal(T.reshape(x, (3, 2)).data, x.data.reshape(3, 2))
    np.testing.assert_array_equal(T.flip(x, 1).data, x.data[:, ::-1])
    assert T.concat([x, x], 0).shape == (4, 3)
    with pytest.raises(ShapeError):
        T.permute(x, (0, 0))
    with pytest.raises(ShapeError):
        T.reshape(x, (4, 2))


@pytest.mark.parametrize(
    "kind", ["square", "tanh", "exp", "negate", "sigmoid", "sqrt", "log"]
)
def test_unary_gradcheck(kind):
    x = Tensor(np.linspace(0.3, 1.7, 6).reshape(2, 3))
    err = T.gradcheck(lambda t: T.reduce("sum", T.elementwise(kind, t), (0, 1)), x)
    assert err < 1e-6


def test_matmul_and_reductions_gradcheck():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 3, 4)))
    b = Tensor(rng.normal(size=(2, 4, 2)))
    w = Tensor(rng.normal(size=(2, 3, 2)))

    def f(s, t):
        prod = s @ t
        return T.reduce("sum", T.softmax(prod, 2) * w, (0, 1, 2)) + T.reduce(
            "variance", prod, (1, 2)
        ).sum(0)

    assert T.gradcheck(f, [a, b]) < 1e-6


def test_gradcheck_element_subset():
    x = Tensor(np.linspace(-1.0, 1.0, 50))
    err = T.gradcheck(lambda t: T.reduce("sum", t.square(), 0), x, max_elements=5)
    assert err < 1e-6


def test_gradcheck_one_sided_tolerates_kinks():
    x = Tensor(np.array([1e-7, 0.5, -0.3]))

    def f(t):
        return T.reduce("sum", t.relu(), 0)

    assert T.gradcheck(f, x, step=1e-5) > 0.4
    assert T.gradcheck(f, x, step=1e-5, one_sided=True) < 1e-8


def test_gradcheck_one_sided_still_flags_wrong_gradients():
    x = Tensor(np.array([0.2, 0.7]))

    def wrong(t):
        # stop-gradient trick: value of t², gradient of t
        return T.reduce("sum", t + Tensor(t.data**2 - t.data), 0)

    assert T.gradcheck(wrong, x, one_sided=True) > 0.1
