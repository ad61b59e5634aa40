"""
Tests for the tensor_core module.

These tests verify the elementwise suite, the dilated convolution against
the scalar loop oracle, and reverse-mode gradients against central
differences.
"""

import threading

import numpy as np
import pytest

from mifcn import oracles
from mifcn.errors import PreconditionError
from mifcn.tensor_core import (
    ConvSpec,
    Tensor,
    add,
    add_n,
    backward,
    conv2d_dilated,
    div,
    exp,
    finite_difference_grad,
    hadamard,
    lrelu,
    no_grad,
    reduce_mean,
    reshape,
    scale,
    square,
    sub,
)


def impulse(size=5, at=(2, 2)):
    x = np.zeros((1, size, size))
    x[0, at[0], at[1]] = 1.0
    return x


class TestElementwise:
    """Test the elementwise operations."""

    def test_hadamard(self):
        """Test the Hadamard product."""
        np.testing.assert_array_equal(hadamard([1.0, 2.0], [3.0, 4.0]).data, [3.0, 8.0])

    def test_div(self):
        """Test elementwise division."""
        np.testing.assert_array_equal(div([2.0, 2.0], [4.0, 8.0]).data, [0.5, 0.25])

    def test_div_by_zero_raises(self):
        """Test that a zero denominator is rejected."""
        with pytest.raises(PreconditionError):
            div([1.0, 1.0], [1.0, 0.0])

    def test_exp_of_zero_difference_is_one(self):
        """Test exp(-D/h) with D = 0."""
        out = exp(scale(np.zeros((3, 4)), -1.0 / 400.0))
        np.testing.assert_array_equal(out.data, np.ones((3, 4)))

    def test_sub_and_square(self):
        """Test subtraction followed by squaring."""
        np.testing.assert_array_equal(square(sub([3.0, 1.0], [1.0, 4.0])).data, [4.0, 9.0])

    def test_shape_mismatch_raises(self):
        """Test that operands of different shapes are rejected."""
        with pytest.raises(PreconditionError, match="shapes differ"):
            add(np.zeros(3), np.zeros(4))
        with pytest.raises(PreconditionError):
            hadamard(np.zeros((2, 2)), np.zeros(4))

    def test_add_n_needs_operands(self):
        """Test add_n on an empty list."""
        with pytest.raises(PreconditionError):
            add_n([])

    def test_reshape_size_mismatch(self):
        """Test that reshape refuses a different element count."""
        with pytest.raises(PreconditionError):
            reshape(np.zeros(6), (4, 2))

    def test_operators(self):
        """Test the Tensor arithmetic dunders."""
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 5.0])
        np.testing.assert_array_equal((a + b).data, [4.0, 7.0])
        np.testing.assert_array_equal((b - a).data, [2.0, 3.0])
        np.testing.assert_array_equal((a * b).data, [3.0, 10.0])
        np.testing.assert_array_equal((-a).data, [-1.0, -2.0])


class TestLrelu:
    """Test the leaky ReLU."""

    @pytest.mark.parametrize(
        "x, alpha, expected",
        [(-1.0, 0.2, -0.2), (0.0, 0.2, 0.0), (3.5, 0.2, 3.5), (3.5, 0.0, 3.5)],
    )
    def test_values(self, x, alpha, expected):
        """Test max(alpha * x, x) at representative points."""
        assert lrelu([x], alpha).data[0] == pytest.approx(expected)

    def test_alpha_out_of_range(self):
        """Test that alpha must lie in [0, 1)."""
        with pytest.raises(PreconditionError):
            lrelu([1.0], 1.0)
        with pytest.raises(PreconditionError):
            lrelu([1.0], -0.1)

    def test_gradient_slopes(self):
        """Test the slope on each side of the kink, and alpha at zero."""
        x = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
        grads = backward(reduce_mean(lrelu(x, 0.2)))
        np.testing.assert_allclose(grads[x], [0.2 / 3, 0.2 / 3, 1.0 / 3])


class TestReduceMean:
    """Test reduce_mean."""

    def test_values(self):
        """Test small closed-form means."""
        assert reduce_mean([1.0, 2.0, 3.0]).item() == 2.0
        assert reduce_mean(np.zeros(7)).item() == 0.0

    def test_matches_pairwise_sum(self, rng):
        """Test a random vector against recursive pairwise summation."""
        values = rng.normal(size=100)
        assert abs(reduce_mean(values).item() - oracles.pairwise_mean(values)) < 1e-12

    def test_empty_raises(self):
        """Test that an empty tensor has no mean."""
        with pytest.raises(PreconditionError):
            reduce_mean(np.zeros(0))


class TestConv2dDilated:
    """Test the dilated convolution."""

    def test_impulse_dilation_one(self):
        """Test the impulse response of a 3x3 all-ones kernel."""
        out = conv2d_dilated(impulse(), np.ones((1, 1, 3, 3)), np.zeros(1)).data[0]
        expected = np.zeros((5, 5))
        expected[1:4, 1:4] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_impulse_dilation_two(self):
        """Test that dilation 2 spreads the taps two pixels apart."""
        spec = ConvSpec(kernel_size=3, dilation=2)
        out = conv2d_dilated(impulse(), np.ones((1, 1, 3, 3)), np.zeros(1), spec).data[0]
        expected = np.zeros((5, 5))
        expected[::2, ::2] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_orientation_is_convolution(self):
        """Test that an off-center tap shifts the impulse away from it (a = x - d*b)."""
        kernels = np.zeros((1, 1, 3, 3))
        kernels[0, 0, 0, 0] = 1.0  # offset b = (-1, -1)
        out = conv2d_dilated(impulse(), kernels, np.zeros(1)).data[0]
        assert out[3, 3] == 1.0
        assert out.sum() == 1.0

    @pytest.mark.parametrize("k", [1, 3])
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_matches_loop_oracle(self, rng, k, d):
        """Test random inputs against the direct quadruple loop."""
        x = rng.normal(size=(3, 8, 8))
        kernels = rng.normal(size=(4, 3, k, k))
        bias = rng.normal(size=4)
        fast = conv2d_dilated(x, kernels, bias, ConvSpec(kernel_size=k, dilation=d)).data
        slow = oracles.conv2d_loop(x, kernels, bias, d)
        assert np.max(np.abs(fast - slow)) <= 1e-12

    @pytest.mark.parametrize("d", [1, 3])
    def test_row_blocks_match_loop_oracle(self, rng, mocker, d):
        """Test that evaluating one output row per block gives the same result."""
        mocker.patch("mifcn.tensor_core._BLOCK_ELEMENTS", 1)
        x = rng.normal(size=(2, 2, 7, 5))
        kernels = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        out = conv2d_dilated(x, kernels, bias, ConvSpec(kernel_size=3, dilation=d)).data
        for n in range(2):
            slow = oracles.conv2d_loop(x[n], kernels, bias, d)
            assert np.max(np.abs(out[n] - slow)) <= 1e-12

    def test_batch_matches_single(self, rng):
        """Test that the batch axis evaluates each sample independently."""
        x = rng.normal(size=(3, 2, 6, 7))
        kernels = rng.normal(size=(2, 2, 3, 3))
        bias = rng.normal(size=2)
        spec = ConvSpec(kernel_size=3, dilation=2)
        batched = conv2d_dilated(x, kernels, bias, spec).data
        for n in range(3):
            np.testing.assert_allclose(batched[n], conv2d_dilated(x[n], kernels, bias, spec).data, atol=1e-12)

    def test_linearity(self, rng):
        """Test conv(aX + bY) = a conv(X) + b conv(Y) with zero bias."""
        x, y = rng.normal(size=(2, 2, 9, 9))
        kernels = rng.normal(size=(3, 2, 3, 3))
        zero = np.zeros(3)
        spec = ConvSpec(kernel_size=3, dilation=2)
        lhs = conv2d_dilated(1.5 * x - 0.7 * y, kernels, zero, spec).data
        rhs = 1.5 * conv2d_dilated(x, kernels, zero, spec).data - 0.7 * conv2d_dilated(y, kernels, zero, spec).data
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    @pytest.mark.parametrize("size", [(1, 1), (2, 3), (5, 1)])
    def test_same_padding_preserves_extent(self, rng, size):
        """Test that tiny images keep their shape under wide dilation."""
        x = rng.normal(size=(1,) + size)
        out = conv2d_dilated(x, rng.normal(size=(2, 1, 3, 3)), np.zeros(2), ConvSpec(dilation=3))
        assert out.shape == (2,) + size

    def test_even_kernel_raises(self):
        """Test that even kernel sizes are rejected."""
        with pytest.raises(PreconditionError):
            ConvSpec(kernel_size=2)
        with pytest.raises(PreconditionError, match="odd"):
            conv2d_dilated(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(1))

    def test_channel_mismatch_raises(self):
        """Test that input channels must match the kernels."""
        with pytest.raises(PreconditionError, match="channels"):
            conv2d_dilated(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_bias_shape_raises(self):
        """Test that the bias must have one entry per output channel."""
        with pytest.raises(PreconditionError, match="bias"):
            conv2d_dilated(np.zeros((1, 4, 4)), np.zeros((2, 1, 3, 3)), np.zeros(3))


class TestBackward:
    """Test reverse-mode differentiation."""

    def test_mean_of_squares(self, rng):
        """Test d mean(x^2) / dx = 2x / n."""
        values = rng.normal(size=10)
        x = Tensor(values, requires_grad=True)
        grads = backward(reduce_mean(square(x)))
        np.testing.assert_allclose(grads[x], 2.0 * values / 10, rtol=1e-14)
        np.testing.assert_array_equal(x.grad, grads[x])

    def test_fan_out_accumulates(self):
        """Test that y = x + x has gradient 2."""
        x = Tensor([1.5], requires_grad=True)
        grads = backward(reduce_mean(add(x, x)))
        assert grads[x][0] == 2.0

    def test_no_grad_skips_graph(self):
        """Test that results built under no_grad are constants with the same values."""
        x = Tensor([1.0, -2.0], requires_grad=True)
        with no_grad():
            y = lrelu(scale(x, 3.0), 0.2)
        assert not y.requires_grad
        assert y.parents == ()
        np.testing.assert_array_equal(y.data, [3.0, -1.2])
        assert square(x).requires_grad

    def test_no_grad_is_per_thread(self):
        """Test that another thread still records while one is inside no_grad."""
        x = Tensor([1.0], requires_grad=True)
        recorded = []
        with no_grad():
            worker = threading.Thread(target=lambda: recorded.append(square(x).requires_grad))
            worker.start()
            worker.join()
        assert recorded == [True]

    def test_non_scalar_root_raises(self):
        """Test that backward needs a scalar root."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(PreconditionError, match="scalar"):
            backward(square(x))

    def test_constants_grow_no_graph(self):
        """Test that operations on constants record no parents."""
        out = hadamard(Tensor([1.0]), Tensor([2.0]))
        assert out.parents == ()
        assert not out.requires_grad

    def test_only_leaves_reported(self):
        """Test that the gradient map holds leaves requiring gradients only."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([3.0, 4.0])
        grads = backward(reduce_mean(hadamard(square(x), c)))
        assert list(grads) == [x]
        np.testing.assert_allclose(grads[x], [3.0, 8.0])

    def test_fusion_style_graph_matches_finite_differences(self, rng):
        """Test a graph using every elementwise op against central differences."""
        a_values, b_values = rng.normal(size=(2, 4, 5))
        a = Tensor(a_values, requires_grad=True)
        b = Tensor(b_values, requires_grad=True)

        def build(av, bv):
            w1 = exp(scale(square(sub(av, av)), -0.5))
            w2 = exp(scale(square(sub(av, bv)), -0.5))
            total = add(w1, w2)
            return reduce_mean(add(hadamard(div(w1, total), av), hadamard(div(w2, total), bv)))

        grads = backward(build(a, b))
        numeric_a = finite_difference_grad(lambda v: build(Tensor(v), b_values).item(), a_values)
        numeric_b = finite_difference_grad(lambda v: build(a_values, Tensor(v)).item(), b_values)
        np.testing.assert_allclose(grads[a], numeric_a, rtol=1e-5, atol=1e-9)
        np.testing.assert_allclose(grads[b], numeric_b, rtol=1e-5, atol=1e-9)

    def test_conv_gradients_match_finite_differences(self, rng):
        """Test conv input, kernel and bias gradients through an lrelu."""
        x = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
        kernels = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        bias = Tensor(rng.normal(size=3), requires_grad=True)
        spec = ConvSpec(kernel_size=3, dilation=2)

        def objective(xv, kv, bv):
            return reduce_mean(square(lrelu(conv2d_dilated(xv, kv, bv, spec), 0.2)))

        grads = backward(objective(x, kernels, bias))
        checks = [
            (x, lambda v: objective(v, kernels.data, bias.data).item()),
            (kernels, lambda v: objective(x.data, v, bias.data).item()),
            (bias, lambda v: objective(x.data, kernels.data, v).item()),
        ]
        for leaf, f in checks:
            numeric = finite_difference_grad(f, leaf.data)
            np.testing.assert_allclose(grads[leaf], numeric, rtol=1e-5, atol=1e-8)


class TestFiniteDifferenceGrad:
    """Test the central-difference oracle."""

    def test_sum_of_squares(self):
        """Test f = sum(x^2) at [1, 2]."""
        grad = finite_difference_grad(lambda v: float(np.sum(v**2)), np.array([1.0, 2.0]))
        np.testing.assert_allclose(grad, [2.0, 4.0], atol=1e-8)

    def test_lrelu_mean_at_positive_point(self):
        """Test that the mean of lrelu is flat 1/n on positive inputs."""
        x = np.array([0.5, 1.0, 2.0, 4.0])
        grad = finite_difference_grad(lambda v: reduce_mean(lrelu(v, 0.2)).item(), x)
        np.testing.assert_allclose(grad, np.full(4, 0.25), atol=1e-8)

    def test_selected_coordinates(self):
        """Test that coords limits the estimate to the given flat indices."""
        x = np.arange(6.0).reshape(2, 3)
        grad = finite_difference_grad(lambda v: float(np.sum(v**2)), x, coords=[1, 5])
        np.testing.assert_allclose(grad, [2.0, 10.0], atol=1e-6)
        np.testing.assert_array_equal(x, np.arange(6.0).reshape(2, 3))

    def test_step_must_be_positive(self):
        """Test that eps <= 0 is rejected."""
        with pytest.raises(PreconditionError):
            finite_difference_grad(lambda v: 0.0, np.zeros(2), eps=0.0)
