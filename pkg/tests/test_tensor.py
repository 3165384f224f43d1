import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convalarm.tensor import (
    BCE_EPS,
    ShapeError,
    Tape,
    Tensor,
    backward,
    bce,
    elementwise,
    elu,
    flatten,
    linear,
    mse,
    mul,
    per_sample_mse,
    relu,
    reshape,
    reshape_split_stack,
    sigmoid,
    slice_cols,
    sum_all,
)

from oracles import linear_loop, numeric_gradients


class TestActivations:
    def test_elu_positive_branch_identity(self):
        x = Tensor([0.0, 1.0])
        np.testing.assert_allclose(elu(x).data, [0.0, 1.0])

    def test_elu_negative_closed_form(self):
        out = elu(Tensor([-1.0])).data
        np.testing.assert_allclose(out, [math.exp(-1.0) - 1.0], rtol=1e-6)

    def test_sigmoid_symmetry(self):
        assert sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)

    def test_sigmoid_extreme_stability(self):
        out = sigmoid(Tensor([-100.0, 100.0])).data
        assert np.all(np.isfinite(out))
        assert 0.0 <= out[0] < 1e-6 and 1.0 - 1e-6 < out[1] <= 1.0

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-2.0, 0.0, 3.0])).data,
                                      [0.0, 0.0, 3.0])

    def test_elementwise_dispatch(self):
        x = Tensor([0.5, -0.5])
        np.testing.assert_array_equal(elementwise("elu", x).data, elu(x).data)
        with pytest.raises(ValueError, match="unknown elementwise"):
            elementwise("tanh", x)


class TestLinear:
    def test_identity_map(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        w = Tensor(np.eye(3, dtype=np.float32))
        b = Tensor(np.zeros(3, dtype=np.float32))
        np.testing.assert_array_equal(linear(x, w, b).data, x.data)

    def test_bias_shift(self):
        out = linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]),
                     Tensor([3.0, 4.0]))
        np.testing.assert_allclose(out.data, [[4.0, 6.0]])

    def test_random_vs_loop_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 7)).astype(np.float32)
        w = rng.standard_normal((7, 5)).astype(np.float32)
        b = rng.standard_normal(5).astype(np.float32)
        out = linear(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, linear_loop(x, w, b), atol=1e-5)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError, match="does not match"):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))),
                   Tensor(np.zeros(5)))


class TestShapeOps:
    def test_split_rows(self):
        x = Tensor(np.arange(1, 7, dtype=np.float32)[None, :])
        out = reshape_split_stack(x, 2)
        np.testing.assert_array_equal(out.data, [[[1, 2, 3], [4, 5, 6]]])

    def test_split_degenerate_k1(self):
        x = Tensor(np.arange(4, dtype=np.float32)[None, :])
        out = reshape_split_stack(x, 1)
        assert out.shape == (1, 1, 4)
        np.testing.assert_array_equal(out.data[0, 0], x.data[0])

    def test_split_round_trip_random(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((8, 24)).astype(np.float32)
        back = flatten(reshape_split_stack(Tensor(x), 4))
        np.testing.assert_array_equal(back.data, x)

    def test_split_reports_both_values(self):
        with pytest.raises(ShapeError, match="k=4.*D=6"):
            reshape_split_stack(Tensor(np.zeros((2, 6))), 4)

    def test_slice_cols(self):
        x = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4))
        np.testing.assert_array_equal(slice_cols(x, 1, 3).data, x.data[:, 1:3])


class TestLosses:
    def test_mse_perfect(self):
        x = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
        assert mse(x, Tensor(x.data.copy())).item() == 0.0

    def test_mse_unit_offset(self):
        assert mse(Tensor([[0.0, 0.0]]), Tensor([[1.0, 1.0]])).item() == 1.0

    def test_bce_perfect_prediction(self):
        out = bce(Tensor([1.0]), Tensor([1.0 - BCE_EPS]))
        assert out.item() == pytest.approx(0.0, abs=1e-6)

    def test_bce_half(self):
        assert bce(Tensor([1.0]), Tensor([0.5])).item() == pytest.approx(
            math.log(2.0), rel=1e-6)

    def test_bce_clamps_saturated_predictions(self):
        out = bce(Tensor([1.0, 0.0]), Tensor([1e-12, 1.0 - 1e-12]))
        assert np.isfinite(out.item())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
        with pytest.raises(ShapeError):
            bce(Tensor(np.zeros(3)), Tensor(np.full(4, 0.5)))

    def test_per_sample_mse_matches_loop(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        y = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        got = per_sample_mse(Tensor(x), Tensor(y)).data
        want = [np.mean((x[i] - y[i]) ** 2) for i in range(4)]
        np.testing.assert_allclose(got, want, rtol=1e-5)


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)),
                   requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_scalar_regression_closed_form(self):
        # loss = mse(w*x, t) for scalar w: dloss/dw = 2*x*(w*x - t)
        x_val, t_val, w_val = 3.0, 5.0, 0.7
        w = Tensor([w_val], requires_grad=True)
        with Tape() as tape:
            loss = mse(Tensor([t_val]), mul(w, Tensor([x_val])))
        backward(loss, tape)
        expected = 2.0 * x_val * (w_val * x_val - t_val)
        np.testing.assert_allclose(w.grad, [expected], rtol=1e-5)

    def test_composite_graph_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x0 = rng.standard_normal((3, 5))
        w0 = rng.standard_normal((5, 2))
        b0 = rng.standard_normal(2)

        def run(arrays):
            x, w, b = (Tensor(a, requires_grad=True, dtype=np.float64)
                       for a in arrays)
            with Tape() as tape:
                h = elu(linear(x, w, b))
                loss = mse(Tensor(np.ones((3, 2)), dtype=np.float64), h)
            return x, w, b, loss, tape

        x, w, b, loss, tape = run([x0, w0, b0])
        backward(loss, tape)

        def f(arrays):
            *_, loss, _ = run(arrays)
            return loss.item()

        for got, want in zip([x.grad, w.grad, b.grad],
                             numeric_gradients(f, [x0, w0, b0])):
            np.testing.assert_allclose(got, want, rtol=1e-3, atol=1e-6)

    def test_grad_accumulates_across_reuse(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            loss = sum_all(mul(x, x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [4.0], rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = mul(x, x)
        with pytest.raises(ShapeError, match="scalar"):
            backward(y, tape)

    def test_double_backward_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        backward(loss, tape)
        with pytest.raises(RuntimeError, match="consumed"):
            backward(loss, tape)

    def test_loss_from_other_tape_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape1:
            loss = sum_all(x)
        with Tape() as tape2:
            sum_all(x)
        with pytest.raises(ValueError, match="not produced on this tape"):
            backward(loss, tape2)

    def test_no_recording_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = mul(x, x)
        assert not y.requires_grad

    def test_untouched_branch_gets_no_grad(self):
        x = Tensor([1.0], requires_grad=True)
        z = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            mul(z, z)  # dead branch
            loss = sum_all(mul(x, x))
        backward(loss, tape)
        assert z.grad is None
        assert x.grad is not None


class TestDtypeAndDeterminism:
    def test_float32_default_and_float64_preserved(self):
        assert Tensor([1, 2, 3]).dtype == np.float32
        t64 = Tensor(np.zeros(3, dtype=np.float64))
        assert t64.dtype == np.float64
        assert elu(t64).dtype == np.float64

    def test_ops_bit_deterministic(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((4, 6)).astype(np.float32)
        w = rng.standard_normal((6, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        a = linear(elu(Tensor(x)), Tensor(w), Tensor(b)).data
        bb = linear(elu(Tensor(x)), Tensor(w), Tensor(b)).data
        np.testing.assert_array_equal(a, bb)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 6), d=st.integers(1, 24), data=st.data())
def test_split_stack_round_trip_property(n, d, data):
    divisors = [k for k in range(1, d + 1) if d % k == 0]
    k = data.draw(st.sampled_from(divisors))
    x = np.arange(n * d, dtype=np.float32).reshape(n, d)
    out = reshape_split_stack(Tensor(x), k)
    assert out.shape == (n, k, d // k)
    np.testing.assert_array_equal(flatten(out).data, x)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-10, 10, width=32), min_size=1, max_size=16))
def test_mse_nonnegative_and_zero_iff_equal(vals):
    x = Tensor(np.asarray(vals, dtype=np.float32)[None, :])
    y = Tensor(np.asarray(vals, dtype=np.float32)[None, :])
    assert mse(x, y).item() == 0.0
