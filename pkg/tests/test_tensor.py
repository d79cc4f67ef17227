"""Op-level oracles and gradient checks for the autodiff core."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossmodal import tensor as T
from crossmodal.tensor import (
    DimensionError,
    NondeterministicFunctionError,
    NumericError,
    Tensor,
    backward,
    finite_difference_check,
)


def randt(rng, *shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


class TestForwardOracles:
    def test_softmax_uniform_logits(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], atol=1e-7)

    def test_l2_normalize_345(self):
        out = T.l2_normalize(Tensor([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-6)

    def test_matmul_shape_rule(self):
        rng = np.random.default_rng(0)
        out = T.matmul(randt(rng, 2, 3), randt(rng, 3, 4))
        assert out.shape == (2, 4)

    def test_matmul_inner_dim_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(DimensionError) as exc:
            T.matmul(randt(rng, 2, 3), randt(rng, 4, 2))
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_add_shape_mismatch_reports_both(self):
        with pytest.raises(DimensionError) as exc:
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
        assert "(2, 3)" in str(exc.value) and "(4,)" in str(exc.value)

    def test_nonfinite_output_names_op(self):
        with pytest.raises(NumericError, match="log"):
            T.log(Tensor([0.0]))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = T.softmax(randt(rng, 5, 7, requires_grad=False))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-5)
        assert np.all(out.data > 0) and np.all(out.data < 1)

    def test_softmax_large_logits_stable(self):
        out = T.softmax(Tensor([1000.0, 999.0, -1000.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data.sum(), 1.0, atol=1e-6)

    def test_concat_slice_roundtrip(self):
        rng = np.random.default_rng(2)
        a, b = randt(rng, 2, 3), randt(rng, 2, 5)
        cat = T.concat([a, b], axis=1)
        back = T.slice_axis(cat, 1, 3, 8)
        np.testing.assert_array_equal(back.data, b.data)

    def test_gather_out_of_range(self):
        table = Tensor(np.zeros((4, 2)))
        with pytest.raises(IndexError):
            T.gather_rows(table, np.array([0, 4]))


class TestBackward:
    def test_sum_grad_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(T.sum_(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(T.sum_(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-6)

    def test_backward_requires_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(DimensionError):
            backward(x)

    def test_double_backward_accumulates_2x(self):
        rng = np.random.default_rng(3)
        x = randt(rng, 4)
        w = randt(rng, 4, 4)
        loss = T.sum_(T.matmul(T.reshape(x, (1, 4)), w))
        backward(loss)
        once = x.grad.copy()
        backward(loss)
        np.testing.assert_allclose(x.grad, 2.0 * once, atol=1e-6)

    def test_grad_accumulates_across_uses(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.add(x, x)  # dy/dx = 2
        backward(T.sum_(y))
        np.testing.assert_allclose(x.grad, [2.0])

    def test_detached_tensor_is_constant(self):
        x = Tensor([3.0], requires_grad=True)
        y = T.mul(x, x.detach())  # treated as x * const
        backward(T.sum_(y))
        np.testing.assert_allclose(x.grad, [3.0])

    def test_no_grad_blocks_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad and y._parents == ()

    def test_broadcast_bias_grad_sums(self):
        rng = np.random.default_rng(4)
        x = randt(rng, 3, 5, requires_grad=False)
        b = randt(rng, 5)
        backward(T.sum_(T.add(x, b)))
        np.testing.assert_allclose(b.grad, np.full(5, 3.0), atol=1e-6)


FD_OPS = {
    "matmul": lambda rng: (
        lambda x: T.sum_(T.mul(y := T.matmul(x, x), y)),
        randt(rng, 3, 3)),
    "softmax_pick": lambda rng: (
        lambda x: T.slice_axis(T.softmax(x), 0, 1, 2),
        randt(rng, 5)),
    "gelu": lambda rng: (lambda x: T.sum_(T.gelu(x)), randt(rng, 6)),
    "relu": lambda rng: (lambda x: T.sum_(T.mul(r := T.relu(x), r)), randt(rng, 6)),
    "sigmoid": lambda rng: (lambda x: T.sum_(T.sigmoid(x)), randt(rng, 6)),
    "tanh": lambda rng: (lambda x: T.sum_(T.tanh(x)), randt(rng, 6)),
    "log": lambda rng: (
        lambda x: T.sum_(T.log(T.add(T.mul(x, x), Tensor([1.0])))),
        randt(rng, 5)),
    "layer_norm": lambda rng: (
        lambda x: T.sum_(T.mul(h := T.layer_norm(x, Tensor(np.ones(4) * 1.3, requires_grad=False),
                                                 Tensor(np.zeros(4), requires_grad=False)), h)),
        randt(rng, 2, 4)),
    "l2_normalize": lambda rng: (
        lambda x: T.sum_(T.mul(n := T.l2_normalize(x), T.softmax(n))),
        randt(rng, 3, 4)),
    "mean": lambda rng: (lambda x: T.mean(T.mul(x, x)), randt(rng, 7)),
    "transpose": lambda rng: (
        lambda x: T.sum_(T.mul(t := T.transpose(x), t)), randt(rng, 2, 3)),
    "concat": lambda rng: (
        lambda x: T.sum_(T.mul(c := T.concat([x, x], axis=0), c)), randt(rng, 2, 3)),
    "clip": lambda rng: (
        lambda x: T.sum_(T.mul(c := T.clip(x, -0.5, 0.5), c)), randt(rng, 8)),
}


class TestFiniteDifference:
    @pytest.mark.parametrize("name", sorted(FD_OPS))
    def test_op_gradients(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        f, x = FD_OPS[name](rng)
        assert finite_difference_check(f, x, eps=1e-3) < 1e-3

    def test_sum_of_squares_example(self):
        rng = np.random.default_rng(8)
        x = randt(rng, 8)
        err = finite_difference_check(lambda t: T.sum_(T.mul(t, t)), x, eps=1e-3)
        assert err < 1e-4

    def test_softmax_then_pick_example(self):
        rng = np.random.default_rng(5)
        x = randt(rng, 5)
        err = finite_difference_check(
            lambda t: T.slice_axis(T.softmax(t), 0, 2, 3), x, eps=1e-3)
        assert err < 1e-3

    def test_constant_function_zero_error(self):
        x = Tensor(np.ones(4), requires_grad=True)
        err = finite_difference_check(lambda t: T.sum_(T.mul(t, Tensor(np.zeros(4)))), x)
        assert err == 0.0

    def test_nondeterministic_f_rejected(self):
        rng = np.random.default_rng(6)
        x = randt(rng, 3)

        def f(t):
            return T.sum_(T.mul(t, Tensor(rng.standard_normal(3))))

        with pytest.raises(NondeterministicFunctionError):
            finite_difference_check(f, x)

    def test_eps_must_be_positive(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ValueError):
            finite_difference_check(lambda t: T.sum_(t), x, eps=0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8))
def test_softmax_distribution_property(logits):
    out = T.softmax(Tensor(logits))
    assert abs(out.data.sum() - 1.0) < 1e-5
    assert np.all(out.data > 0.0) and np.all(out.data < 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_composed_graph_fd_property(seed):
    rng = np.random.default_rng(seed)
    x = randt(rng, 2, 4)
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=False)

    def f(t):
        h = T.gelu(T.matmul(t, w))
        h = T.layer_norm(h, Tensor(np.ones(4), requires_grad=False),
                         Tensor(np.zeros(4), requires_grad=False))
        return T.sum_(T.mul(T.softmax(h), h))

    assert finite_difference_check(f, x, eps=1e-3) < 2e-3
