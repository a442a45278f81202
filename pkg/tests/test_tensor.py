import numpy as np
import pytest

from fmpestf import tensor as T
from fmpestf.tensor import (
    GradCheckReport,
    NumericsError,
    Parameter,
    ShapeError,
    Tensor,
    grad_check,
    no_grad,
)


def make_param(name, shape, seed):
    rng = np.random.default_rng(seed)
    return Parameter(name, rng.normal(size=shape))


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_hand_checked_1x2_2x1(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))
        assert "(3, 4)" in str(exc.value) and "(3, 2)" in str(exc.value)

    def test_gradients_match_finite_differences(self):
        a = make_param("a", (3, 4), 1)
        b = make_param("b", (4, 2), 2)
        c = Tensor(np.random.default_rng(3).normal(size=(3, 2)))

        def f():
            return T.tsum(T.mul(T.matmul(a, b), c))

        report = grad_check(f, [a, b])
        assert report.max_rel_err < 1e-6


class TestElementwise:
    def test_hadamard_zero_annihilator(self):
        out = T.elementwise("hadamard", Tensor([1.0, 2.0, 3.0]), Tensor([0.0, 0.0, 0.0]))
        assert out.data.tolist() == [0.0, 0.0, 0.0]

    def test_softmax_symmetry(self):
        out = T.elementwise("softmax", Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5], atol=0)

    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            x = Tensor(rng.normal(scale=5.0, size=(4, 6)))
            s = T.softmax(x, axis=-1)
            assert np.all(s.data >= 0)
            assert np.max(np.abs(s.data.sum(axis=-1) - 1.0)) <= 1e-9

    def test_leading_axis_broadcast_allowed(self):
        a = Tensor(np.ones((2, 3, 4)))
        b = Tensor(np.ones((3, 4)))
        assert T.add(a, b).shape == (2, 3, 4)

    def test_inner_broadcast_rejected(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones((2, 1, 4))), Tensor(np.ones((2, 3, 4))))

    def test_scalar_broadcast(self):
        out = Tensor(np.ones((2, 2))) * 3.0
        assert np.array_equal(out.data, np.full((2, 2), 3.0))

    def test_broadcast_gradient_sums_leading_axes(self):
        a = Tensor(np.ones((2, 3)))
        b = make_param("b", (3,), 0)
        out = T.tsum(T.add(a, b))
        out.backward()
        assert np.array_equal(b.grad, np.full(3, 2.0))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            T.elementwise("modulo", Tensor(1.0), Tensor(2.0))


class TestLinear:
    def test_identity_weight_zero_bias(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4, 5)))
        w = Tensor(np.eye(3))
        b = Tensor(np.zeros(3))
        out = T.linear(x, w, b, axis=-3)
        assert np.array_equal(out.data, x.data)

    def test_channel_expansion_shape(self):
        x = Tensor(np.zeros((1, 6, 12)))
        w = Tensor(np.zeros((4, 1)))
        out = T.linear(x, w, axis=-3)
        assert out.shape == (4, 6, 12)

    def test_axis_width_mismatch(self):
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((5, 3))), axis=-3)

    def test_weight_gradient_matches_finite_differences(self):
        x = Tensor(np.random.default_rng(5).normal(size=(3, 2, 4)))
        w = make_param("w", (5, 3), 6)
        b = make_param("b", (5,), 7)
        probe = np.random.default_rng(8).normal(size=(5, 2, 4))

        def f():
            return T.tsum(T.mul(T.linear(x, w, b, axis=-3), Tensor(probe)))

        report = grad_check(f, [w, b])
        assert report.max_rel_err < 1e-6


class TestGradCheckHarness:
    def test_square_function(self):
        w = Parameter("w", 3.0)

        def f():
            return T.mul(w, w)

        report = grad_check(f, [w])
        w.zero_grad()
        out = f()
        out.backward()
        assert w.grad == pytest.approx(6.0, abs=1e-12)
        assert report.max_rel_err < 1e-7

    def test_constant_function_zero_gradients(self):
        w = Parameter("w", np.array([1.0, 2.0]))

        def f():
            return Tensor(5.0)

        report = grad_check(f, [w])
        assert report.max_rel_err == 0.0

    def test_nonfinite_perturbation_names_entry(self):
        # finite at the current point, divides by zero when perturbed by -h
        w = Parameter("w", np.array([1e-5]))

        def f():
            return T.div(Tensor([1.0]), w)

        with pytest.raises(NumericsError) as exc:
            grad_check(f, [w])
        assert "'w'" in str(exc.value) and "(0,)" in str(exc.value)

    def test_report_is_structured(self):
        w = Parameter("w", np.array([[2.0, 1.0]]))

        def f():
            return T.tsum(T.mul(w, w))

        report = grad_check(f, [w])
        assert isinstance(report, GradCheckReport)
        assert report.worst_param == "w"
        assert "w" in str(report)


PRIMITIVE_CASES = {
    "add": lambda p, q: T.add(p, q),
    "sub": lambda p, q: T.sub(p, q),
    "mul": lambda p, q: T.mul(p, q),
    "div": lambda p, q: T.div(p, T.add(T.mul(q, q), Tensor(np.full(q.shape, 0.5)))),
    "neg": lambda p, q: T.neg(p),
    "bmatmul": lambda p, q: T.bmatmul(p, T.moveaxis(q, -1, -2)),
    "relu": lambda p, q: T.relu(p),
    "sigmoid": lambda p, q: T.sigmoid(p),
    "tanh": lambda p, q: T.tanh(p),
    "exp": lambda p, q: T.exp(p),
    "abs": lambda p, q: T.absval(p),
    "softmax": lambda p, q: T.softmax(p, axis=-1),
    "sum_axis": lambda p, q: T.tsum(p, axis=1, keepdims=True),
    "concat": lambda p, q: T.concat([p, q], axis=0),
    "moveaxis": lambda p, q: T.moveaxis(p, 0, 2),
    "reshape": lambda p, q: T.reshape(p, (4, 6)),
    "pad_last": lambda p, q: T.pad_last(p, 2, 1),
    "take_even": lambda p, q: T.take_stride(p, 0, 2),
    "take_odd": lambda p, q: T.take_stride(p, 1, 2),
    "interleave": lambda p, q: T.interleave(p, q),
    "expand_axis": lambda p, q: T.expand_axis(p, -2, 3),
}


@pytest.mark.parametrize("kind", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(sum(map(ord, kind)))
    p = Parameter("p", rng.normal(size=(2, 3, 4)))
    q = Parameter("q", rng.normal(size=(2, 3, 4)))
    build = PRIMITIVE_CASES[kind]
    out_shape = build(p, q).shape
    probe = Tensor(rng.normal(size=out_shape))

    def f():
        return T.tsum(T.mul(build(p, q), probe))

    report = grad_check(f, [p, q])
    assert report.max_rel_err < 1e-6, f"{kind}: {report}"


def test_time_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(42)
    x = Parameter("x", rng.normal(size=(3, 2, 6)))
    w = Parameter("w", rng.normal(size=(3, 3, 5)) * 0.3)
    b = Parameter("b", rng.normal(size=3))
    probe = Tensor(rng.normal(size=(3, 2, 6)))

    def f():
        return T.tsum(T.mul(T.time_conv(x, w, b), probe))

    report = grad_check(f, [x, w, b])
    assert report.max_rel_err < 1e-6


def test_lookup_gradients_scatter_add():
    table = Parameter("table", np.arange(8.0).reshape(4, 2))
    idx = np.array([0, 2, 2, 3])
    out = T.tsum(T.lookup(table, idx))
    out.backward()
    expected = np.array([[1.0, 1.0], [0.0, 0.0], [2.0, 2.0], [1.0, 1.0]])
    assert np.array_equal(table.grad, expected)


def test_lookup_out_of_range_raises_index_error():
    table = Parameter("table", np.zeros((4, 2)))
    with pytest.raises(IndexError):
        T.lookup(table, np.array([4]))


def test_untouched_parameter_keeps_zero_gradient():
    used = Parameter("used", np.ones(3))
    unused = Parameter("unused", np.ones(3))
    T.tsum(used).backward()
    assert np.array_equal(unused.grad, np.zeros(3))


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(11)
    a = Tensor(rng.normal(size=(4, 5)))
    w = Tensor(rng.normal(size=(5, 5)))

    def run():
        return T.softmax(T.bmatmul(T.tanh(a), w), axis=-1).data

    first, second = run(), run()
    assert np.array_equal(first, second)


def test_finite_inputs_give_finite_outputs():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(scale=3.0, size=(3, 4)))
    for make in (lambda: T.relu(x), lambda: T.sigmoid(x), lambda: T.tanh(x),
                 lambda: T.softmax(x, axis=-1), lambda: T.absval(x),
                 lambda: T.mul(x, x), lambda: T.bmatmul(x, T.moveaxis(x, 0, 1))):
        assert np.all(np.isfinite(make().data))


def test_div_by_zero_raises():
    with pytest.raises(NumericsError):
        T.div(Tensor([1.0]), Tensor([0.0]))


def test_exp_overflow_raises():
    with pytest.raises(NumericsError):
        T.exp(Tensor([1e4]))


def test_no_grad_skips_tape():
    w = Parameter("w", 2.0)
    with no_grad():
        out = T.mul(w, w)
    assert out._parents == ()
    assert out._backward is None


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)).backward()


def test_gradient_accumulates_across_shared_subexpression():
    w = Parameter("w", 2.0)
    y = T.mul(w, w)          # w^2
    z = T.add(y, T.mul(w, Tensor(3.0)))  # w^2 + 3w -> dz/dw = 2w + 3 = 7
    z.backward()
    assert w.grad == pytest.approx(7.0, abs=1e-12)
