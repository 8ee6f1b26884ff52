import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from envlink.rng import Rng
from envlink.tensor import (
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat,
    elementwise,
    matmul,
    parameter,
    reduce,
    replace_where,
    reshape,
    scatter_rows,
    softmax_axis,
    take,
    tensor,
)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued f at x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def assert_close_grad(analytic, numeric, rtol=1e-4, atol=1e-7):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def check_unary(tag, x, scalar=None):
    p = parameter(x)
    with Tape() as tape:
        loss = reduce("sum", elementwise(tag, p, scalar=scalar))
    backward(loss, tape)

    def f():
        return elementwise(tag, Tensor(p.data), scalar=scalar).data.sum()

    assert_close_grad(p.grad, numeric_grad(f, p.data))


class TestMatmul:
    def test_hand_product(self):
        out = matmul(tensor([[1.0, 2.0], [3.0, 4.0]]), tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_identity(self):
        a = Rng(3).normal((4, 4))
        out = matmul(tensor(a), tensor(np.eye(4)))
        np.testing.assert_array_equal(out.data, a)

    def test_triple_loop_oracle(self):
        rng = Rng(7)
        a, b = rng.normal((3, 4)), rng.normal((4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(matmul(tensor(a), tensor(b)).data, expected, atol=1e-12)

    def test_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 3))))

    def test_gradient(self):
        rng = Rng(11)
        a = parameter(rng.normal((3, 4)))
        b = parameter(rng.normal((4, 2)))
        with Tape() as tape:
            loss = reduce("sum", elementwise("square", matmul(a, b)))
        backward(loss, tape)

        def f():
            return (elementwise("square", matmul(Tensor(a.data), Tensor(b.data)))).data.sum()

        assert_close_grad(a.grad, numeric_grad(f, a.data))
        assert_close_grad(b.grad, numeric_grad(f, b.data))


class TestElementwise:
    def test_sigmoid_at_zero(self):
        p = parameter([0.0])
        with Tape() as tape:
            loss = reduce("sum", p.sigmoid())
        assert loss.item() == 0.5
        backward(loss, tape)
        np.testing.assert_allclose(p.grad, [0.25])

    def test_leaky_relu_negative(self):
        assert tensor([-1.0]).leaky_relu().data[0] == -0.01

    def test_add(self):
        np.testing.assert_array_equal((tensor([1.0, 2.0]) + tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_broadcast_error(self):
        with pytest.raises(ShapeError):
            elementwise("add", tensor(np.zeros(3)), tensor(np.zeros(4)))

    def test_broadcast_gradients(self):
        rng = Rng(5)
        a = parameter(rng.normal((4, 3)))
        b = parameter(rng.normal((1, 3)))
        with Tape() as tape:
            loss = reduce("sum", elementwise("mul", a, b))
        backward(loss, tape)

        def f():
            return (Tensor(a.data).data * Tensor(b.data).data).sum()

        assert_close_grad(a.grad, numeric_grad(f, a.data))
        assert_close_grad(b.grad, numeric_grad(f, b.data))

    @pytest.mark.parametrize("tag", ["sigmoid", "leaky_relu", "exp", "square", "softplus", "neg"])
    def test_unary_gradients(self, tag):
        check_unary(tag, Rng(2).uniform(6) * 4.0 - 2.0)

    def test_log_gradient(self):
        check_unary("log", Rng(2).uniform(6) + 0.5)

    def test_scalar_tags(self):
        x = Rng(9).normal(5)
        np.testing.assert_array_equal(elementwise("add_scalar", tensor(x), scalar=2.0).data, x + 2.0)
        np.testing.assert_array_equal(elementwise("scale", tensor(x), scalar=-3.0).data, x * -3.0)

    def test_unknown_tag(self):
        with pytest.raises(ValueError, match="unknown elementwise tag"):
            elementwise("cosh", tensor([1.0]))


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax_axis(tensor([0.0, 0.0]), 0).data, [0.5, 0.5])

    def test_analytic(self):
        out = softmax_axis(tensor([np.log(2.0), 0.0]), 0)
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3])

    def test_exp_sum_oracle(self):
        x = Rng(13).normal(6)
        out = softmax_axis(tensor(x), 0).data
        np.testing.assert_allclose(out, np.exp(x) / np.exp(x).sum(), atol=1e-12)
        assert abs(out.sum() - 1.0) < 1e-9

    def test_stability_large_inputs(self):
        out = softmax_axis(tensor([1000.0, 1000.0]), 0).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_gradient(self):
        x = parameter(Rng(17).normal((2, 5)))
        with Tape() as tape:
            loss = reduce("sum", elementwise("square", softmax_axis(x, 1)))
        backward(loss, tape)

        def f():
            s = softmax_axis(Tensor(x.data), 1).data
            return (s * s).sum()

        assert_close_grad(x.grad, numeric_grad(f, x.data))

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_simplex_property(self, values):
        out = softmax_axis(tensor(values), 0).data
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) < 1e-9


class TestReduce:
    def test_mean(self):
        assert reduce("mean", tensor([1.0, 3.0])).item() == 2.0

    def test_population_variance(self):
        assert reduce("variance", tensor([1.0, 3.0])).item() == 1.0

    def test_constant_variance_is_zero(self):
        assert reduce("variance", tensor(np.full(7, 3.25))).item() == 0.0

    def test_axis_reduction(self):
        x = Rng(19).normal((3, 4))
        np.testing.assert_allclose(reduce("mean", tensor(x), axis=1).data, x.mean(axis=1))
        np.testing.assert_allclose(reduce("variance", tensor(x), axis=0).data, x.var(axis=0))

    def test_empty_axis_error(self):
        with pytest.raises(ValueError, match="empty"):
            reduce("sum", tensor(np.zeros((0, 3))), axis=0)

    @pytest.mark.parametrize("tag", ["sum", "mean", "variance"])
    @pytest.mark.parametrize("axis", [None, 0, 1])
    def test_gradients(self, tag, axis):
        x = parameter(Rng(23).uniform((3, 4)) * 4.0 - 2.0)
        with Tape() as tape:
            out = reduce(tag, x, axis=axis)
            loss = reduce("sum", elementwise("square", out)) if out.data.ndim else elementwise("square", out)
        backward(loss, tape)

        def f():
            o = reduce(tag, Tensor(x.data), axis=axis).data
            return (o * o).sum()

        assert_close_grad(x.grad, numeric_grad(f, x.data))


class TestStructuralOps:
    def test_take_scatter_roundtrip(self):
        x = Rng(29).normal((5, 3))
        idx = np.array([4, 0, 0, 2])
        out = take(tensor(x), idx)
        np.testing.assert_array_equal(out.data, x[idx])
        back = scatter_rows(tensor(x[idx]), idx, 5)
        expected = np.zeros((5, 3))
        np.add.at(expected, idx, x[idx])
        np.testing.assert_array_equal(back.data, expected)

    def test_take_axis1_gradient(self):
        x = parameter(Rng(31).normal((2, 5, 3)))
        idx = np.array([1, 1, 4])
        with Tape() as tape:
            loss = reduce("sum", elementwise("square", take(x, idx, axis=1)))
        backward(loss, tape)

        def f():
            o = np.take(x.data, idx, axis=1)
            return (o * o).sum()

        assert_close_grad(x.grad, numeric_grad(f, x.data))

    def test_scatter_gradient(self):
        x = parameter(Rng(37).normal((4, 3)))
        idx = np.array([2, 0, 2, 1])
        with Tape() as tape:
            loss = reduce("sum", elementwise("square", scatter_rows(x, idx, 3)))
        backward(loss, tape)

        def f():
            acc = np.zeros((3, 3))
            np.add.at(acc, idx, x.data)
            return (acc * acc).sum()

        assert_close_grad(x.grad, numeric_grad(f, x.data))

    def test_reshape_concat_gradients(self):
        a = parameter(Rng(41).normal((2, 3)))
        b = parameter(Rng(43).normal((2, 3)))
        with Tape() as tape:
            joined = concat([reshape(a, (2, 3, 1)), reshape(b, (2, 3, 1))], axis=2)
            loss = reduce("sum", elementwise("square", joined))
        backward(loss, tape)
        np.testing.assert_allclose(a.grad, 2 * a.data)
        np.testing.assert_allclose(b.grad, 2 * b.data)

    def test_replace_where(self):
        x = parameter(Rng(47).normal((3, 4)))
        mask = np.zeros((3, 4), dtype=bool)
        mask[1] = True
        values = np.full((3, 4), 9.0)
        with Tape() as tape:
            out = replace_where(x, mask, values)
            loss = reduce("sum", elementwise("square", out))
        assert (out.data[1] == 9.0).all()
        assert (out.data[0] == x.data[0]).all() and (out.data[2] == x.data[2]).all()
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad[1], np.zeros(4))
        np.testing.assert_allclose(x.grad[0], 2 * x.data[0])


class TestBackward:
    def test_square_at_three(self):
        x = parameter([3.0])
        with Tape() as tape:
            loss = reduce("sum", x.square())
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [6.0])

    def test_sigmoid_sum(self):
        x = parameter([0.0, 0.0])
        with Tape() as tape:
            loss = reduce("sum", x.sigmoid())
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [0.25, 0.25])

    def test_reuse_accumulates(self):
        x = parameter([1.5])
        with Tape() as tape:
            loss = reduce("sum", x + x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_non_scalar_loss_rejected(self):
        x = parameter([1.0, 2.0])
        with Tape() as tape:
            y = x.square()
        with pytest.raises(ShapeError, match="scalar"):
            backward(y, tape)

    def test_mlp_finite_difference(self):
        rng = Rng(101)
        w1 = parameter(rng.uniform((4, 6)) - 0.5)
        b1 = parameter(rng.uniform((1, 6)) - 0.5)
        w2 = parameter(rng.uniform((6, 1)) - 0.5)
        x = rng.normal((5, 4))

        def forward():
            h = elementwise("leaky_relu", matmul(Tensor(x), Tensor(w1.data)) + Tensor(b1.data))
            out = matmul(h, Tensor(w2.data)).sigmoid()
            return out.data.sum()

        with Tape() as tape:
            h = elementwise("leaky_relu", matmul(Tensor(x), w1) + b1)
            loss = reduce("sum", matmul(h, w2).sigmoid())
        backward(loss, tape)
        for p in (w1, b1, w2):
            assert_close_grad(p.grad, numeric_grad(forward, p.data))

    def test_no_tape_no_recording(self):
        x = parameter([1.0])
        y = x.square()
        assert y.grad is None
        tape = Tape()
        assert len(tape) == 0


class TestDeterminism:
    def test_bit_identical_sequences(self):
        def run():
            rng = Rng(55)
            a = Tensor(rng.normal((6, 6)))
            b = Tensor(rng.normal((6, 6)))
            out = softmax_axis(matmul(a, b).sigmoid(), 1)
            return reduce("mean", out).item()

        assert run() == run()
