"""Core tensor/gradient machinery against independent oracles.

Derived expectations come from naive loop implementations, direct moment
computation or central finite differences computed inside the tests.
"""

import numpy as np
import pytest

from alcnet import kernels
from alcnet.autodiff import (Parameter, Tensor, backward, conv2d, global_avg_pool, grad_check,
                             maximum, relu, sigmoid, stack_reduce, upsample_nearest)
from alcnet.nn import BatchNorm2d


def naive_conv2d(x, w, stride, padding):
    """Sextuple-loop cross-correlation oracle."""
    cin, h, win = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (win + 2 * padding - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                for ci in range(cin):
                    for ki in range(k):
                        for kj in range(k):
                            out[co, i, j] += w[co, ci, ki, kj] * xp[ci, i * stride + ki, j * stride + kj]
    return out


class TestConv2d:
    def test_identity_1x1_kernel(self):
        x = Tensor(np.arange(9.0).reshape(1, 3, 3))
        w = Tensor(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(conv2d(x, w).data, x.data)

    def test_zero_kernel(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 4, 4)))
        w = Tensor(np.zeros((3, 2, 3, 3)))
        assert np.all(conv2d(x, w).data == 0.0)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_naive_loop_oracle(self, stride):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(2, 5, 5)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        out = conv2d(x, w, stride=stride)
        expected = naive_conv2d(x.data, w.data, stride, 1)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_both_backends_match_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 6, 6))
        w = rng.normal(size=(2, 3, 3, 3))
        expected = naive_conv2d(x, w, 2, 1)
        np.testing.assert_allclose(kernels.conv2d_forward_numpy(x, w, 2, 1), expected, atol=1e-12)
        np.testing.assert_allclose(kernels.conv2d_forward_jit(x, w, 2, 1), expected, atol=1e-12)

    def test_backend_gradients_match_finite_difference_free_oracle(self):
        # grad wrt weight/input via the numpy einsum path equals the jit path
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        gy = rng.normal(size=(3, 3, 3))
        gw_np = kernels.conv2d_grad_weight_numpy(gy, x, 2, 1, 3)
        gw_jit = kernels.conv2d_grad_weight_jit(gy, x, 2, 1, 3)
        np.testing.assert_allclose(gw_np, gw_jit, atol=1e-12)
        gx_np = kernels.conv2d_grad_input_numpy(gy, w, 2, 1, x.shape)
        gx_jit = kernels.conv2d_grad_input_jit(gy, w, 2, 1, x.shape)
        np.testing.assert_allclose(gx_np, gx_jit, atol=1e-12)

    def test_channel_mismatch_names_dimension(self):
        x = Tensor(np.zeros((2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            conv2d(x, w)

    @pytest.mark.parametrize("k,stride", [(1, 1), (1, 2), (3, 1), (3, 2)])
    @pytest.mark.parametrize("h,w", [(4, 4), (5, 7), (8, 6)])
    def test_shape_algebra(self, k, stride, h, w):
        x = Tensor(np.zeros((1, h, w)))
        kern = Tensor(np.zeros((1, 1, k, k)))
        out = conv2d(x, kern, stride=stride)
        assert out.data.shape == (1, int(np.ceil(h / stride)), int(np.ceil(w / stride)))


class TestBatchNorm:
    def test_constant_input_gives_beta(self):
        bn = BatchNorm2d(3)
        bn.beta.data[...] = np.array([1.0, -2.0, 0.5]).reshape(3, 1, 1)
        x = Tensor(np.ones((3, 4, 4)) * np.array([5.0, -1.0, 2.0]).reshape(3, 1, 1))
        out = bn(x)
        np.testing.assert_allclose(out.data, np.broadcast_to(bn.beta.data, (3, 4, 4)), atol=1e-8)

    def test_identity_on_standardized_input(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 16, 16))
        x = (x - x.mean(axis=(1, 2), keepdims=True)) / x.std(axis=(1, 2), keepdims=True)
        out = BatchNorm2d(2)(Tensor(x))
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_output_moments_match_direct_computation(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(loc=3.0, scale=2.5, size=(4, 6, 6)))
        out = BatchNorm2d(4)(x).data
        np.testing.assert_allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(1, 2)), 1.0, atol=1e-3)

    def test_eval_before_train_raises(self):
        bn = BatchNorm2d(2)
        bn.eval()
        with pytest.raises(RuntimeError, match="uninitialized running stats"):
            bn(Tensor(np.zeros((2, 3, 3))))

    def test_eval_uses_running_stats(self):
        rng = np.random.default_rng(7)
        bn = BatchNorm2d(1, momentum=0.0)  # running stats = last batch stats
        x = rng.normal(loc=2.0, scale=3.0, size=(1, 32, 32))
        bn(Tensor(x))
        bn.eval()
        out = bn(Tensor(x)).data
        expected = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_gradcheck_through_train_mode(self):
        rng = np.random.default_rng(8)
        bn = BatchNorm2d(2)
        x = Parameter(rng.normal(size=(2, 5, 5)))

        def build():
            bn.train()
            return (bn(x) * Tensor(rng_fixed)).sum()

        rng_fixed = np.random.default_rng(9).normal(size=(2, 5, 5))
        err = grad_check(build, [x, bn.gamma, bn.beta], eps=1e-5, coords_per_param=5)
        assert err < 1e-6


class TestActivations:
    def test_relu_values(self):
        out = relu(Tensor(np.array([-1.0, 2.0, 0.0])))
        np.testing.assert_array_equal(out.data, [0.0, 2.0, 0.0])

    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(np.zeros(1))).data[0] == 0.5

    def test_sigmoid_gradient_at_zero_is_quarter(self):
        x = Parameter(np.zeros(1))
        err = grad_check(lambda: sigmoid(x).sum(), [x], eps=1e-5)
        backward(sigmoid(x).sum())
        assert err < 1e-9
        x.zero_grad()
        out = sigmoid(x).sum()
        backward(out)
        np.testing.assert_allclose(x.grad, 0.25, atol=1e-12)

    def test_sigmoid_extreme_inputs_stay_finite(self):
        out = sigmoid(Tensor(np.array([-1e4, 1e4])))
        np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)

    def test_relu_gradient_away_from_kink(self):
        # |x| > 10*eps keeps the finite difference on one linear piece
        x = Parameter(np.array([-0.5, 0.4, 2.0]))
        err = grad_check(lambda: (relu(x) * relu(x)).sum(), [x], eps=1e-5)
        assert err < 1e-5


class TestElementwise:
    def test_add_zero_and_mul_one(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(2, 3, 3)))
        np.testing.assert_array_equal((x + Tensor(np.zeros((2, 3, 3)))).data, x.data)
        np.testing.assert_array_equal((x * Tensor(np.ones((2, 3, 3)))).data, x.data)

    def test_max_values_and_gradient_routing(self):
        a = Parameter(np.array([1.0, 5.0]))
        b = Parameter(np.array([3.0, 2.0]))
        out = maximum(a, b)
        np.testing.assert_array_equal(out.data, [3.0, 5.0])
        backward(out.sum())
        np.testing.assert_array_equal(a.grad, [0.0, 1.0])
        np.testing.assert_array_equal(b.grad, [1.0, 0.0])

    def test_max_tie_routes_to_first_operand(self):
        a = Parameter(np.array([2.0]))
        b = Parameter(np.array([2.0]))
        backward(maximum(a, b).sum())
        np.testing.assert_array_equal(a.grad, [1.0])
        np.testing.assert_array_equal(b.grad, [0.0])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="shape"):
            maximum(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


class TestStackReduce:
    def test_single_map_identity(self):
        x = Tensor(np.arange(4.0).reshape(1, 2, 2))
        np.testing.assert_array_equal(stack_reduce([x], "max").data, x.data)

    def test_max_of_zeros_and_ones(self):
        z = Tensor(np.zeros((1, 2, 2)))
        o = Tensor(np.ones((1, 2, 2)))
        np.testing.assert_array_equal(stack_reduce([z, o], "max").data, np.ones((1, 2, 2)))

    @pytest.mark.parametrize("kind", ["min", "max"])
    def test_matches_per_element_loop_oracle(self, kind):
        rng = np.random.default_rng(11)
        maps = [rng.normal(size=(2, 3, 3)) for _ in range(3)]
        out = stack_reduce([Tensor(m) for m in maps], kind).data
        pick = min if kind == "min" else max
        for c in range(2):
            for i in range(3):
                for j in range(3):
                    assert out[c, i, j] == pick(m[c, i, j] for m in maps)

    def test_empty_stack_raises(self):
        with pytest.raises(ValueError, match="empty"):
            stack_reduce([], "max")

    def test_gradient_routes_to_argmax_first_on_ties(self):
        a = Parameter(np.full((1, 1, 1), 2.0))
        b = Parameter(np.full((1, 1, 1), 2.0))
        backward(stack_reduce([a, b], "max").sum())
        assert a.grad[0, 0, 0] == 1.0 and b.grad[0, 0, 0] == 0.0


class TestUpsampleAndPool:
    def test_upsample_single_value(self):
        out = upsample_nearest(Tensor(np.full((1, 1, 1), 7.0)), 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 7.0))

    def test_upsample_matches_index_map_oracle(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 3, 3))
        out = upsample_nearest(Tensor(x), 2).data
        for c in range(2):
            for i in range(6):
                for j in range(6):
                    assert out[c, i, j] == x[c, i // 2, j // 2]

    def test_upsample_adjoint_is_block_sum(self):
        x = Parameter(np.arange(4.0).reshape(1, 2, 2))
        weights = np.random.default_rng(13).normal(size=(1, 4, 4))
        backward((upsample_nearest(x, 2) * Tensor(weights)).sum())
        expected = weights.reshape(1, 2, 2, 2, 2).sum(axis=(2, 4))
        np.testing.assert_allclose(x.grad, expected, atol=1e-12)

    def test_upsample_factor_below_two_raises(self):
        with pytest.raises(ValueError, match="factor"):
            upsample_nearest(Tensor(np.zeros((1, 2, 2))), 1)

    def test_gap_constant_channel(self):
        x = Tensor(np.full((2, 3, 3), 4.5))
        np.testing.assert_allclose(global_avg_pool(x).data, np.full((2, 1, 1), 4.5))

    def test_gap_arithmetic(self):
        x = Tensor(np.array([[[0.0, 2.0], [4.0, 6.0]]]))
        assert global_avg_pool(x).data[0, 0, 0] == 3.0

    def test_gap_gradient_uniform(self):
        x = Parameter(np.random.default_rng(14).normal(size=(1, 4, 4)))
        err = grad_check(lambda: global_avg_pool(x).sum(), [x], eps=1e-5, coords_per_param=8)
        assert err < 1e-9
        x.zero_grad()
        backward(global_avg_pool(x).sum())
        np.testing.assert_allclose(x.grad, 1.0 / 16.0, atol=1e-12)


class TestBackward:
    def test_sum_gradient_ones(self):
        x = Parameter(np.random.default_rng(15).normal(size=(2, 3)))
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gradient_is_2x(self):
        x = Parameter(np.random.default_rng(16).normal(size=(4,)))
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2.0 * x.data, atol=1e-12)

    def test_composed_graph_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        x = Parameter(rng.normal(size=(2, 6, 6)))
        w = Parameter(rng.normal(size=(3, 2, 3, 3)) * 0.4)
        bn = BatchNorm2d(3)

        def build():
            bn.train()
            return relu(bn(conv2d(x, w))).sum()

        err = grad_check(build, [x, w, bn.gamma, bn.beta], eps=1e-5, coords_per_param=6)
        assert err < 1e-4

    def test_non_scalar_output_raises(self):
        x = Parameter(np.zeros((2, 2)))
        with pytest.raises(ValueError, match="scalar"):
            backward(x * x)

    def test_fanout_accumulates_sum_of_path_gradients(self):
        # parameter used twice receives the sum of both path gradients,
        # checked against two separate single-path graphs
        p = Parameter(np.array([1.5, -2.0]))
        c1 = np.array([2.0, 3.0])
        c2 = np.array([-1.0, 4.0])
        backward(((p * Tensor(c1)) + (p * p * Tensor(c2))).sum())
        combined = p.grad.copy()
        p.zero_grad()
        backward((p * Tensor(c1)).sum())
        g1 = p.grad.copy()
        p.zero_grad()
        backward((p * p * Tensor(c2)).sum())
        g2 = p.grad.copy()
        np.testing.assert_allclose(combined, g1 + g2, atol=1e-12)

    def test_unreachable_parameter_untouched(self):
        a = Parameter(np.ones(2))
        b = Parameter(np.ones(2))
        backward((a * a).sum())
        np.testing.assert_array_equal(b.grad, np.zeros(2))


class TestGradCheck:
    def test_linear_function_error_tiny(self):
        x = Parameter(np.random.default_rng(18).normal(size=(5,)))
        err = grad_check(lambda: (x * Tensor(np.arange(5.0))).sum(), [x], eps=1e-5)
        assert err < 1e-9

    def test_sigmoid_chain(self):
        x = Parameter(np.random.default_rng(19).normal(size=(6,)))
        err = grad_check(lambda: sigmoid(sigmoid(x) * x).sum(), [x], eps=1e-5)
        assert err < 1e-5

    def test_eps_out_of_range_raises(self):
        x = Parameter(np.ones(1))
        with pytest.raises(ValueError, match="eps"):
            grad_check(lambda: x.sum(), [x], eps=1e-2)

    def test_non_finite_raises(self):
        x = Parameter(np.array([np.inf]))
        with pytest.raises(FloatingPointError):
            grad_check(lambda: (x * x).sum(), [x], eps=1e-5)


class TestAdjointness:
    """<J dx, u> == <dx, J^T u> for every structural primitive.

    The forward Jacobian action is written per-op from its definition; the
    transpose comes from backward().
    """

    def _adjoint(self, op, jvp, shape, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=shape)
        dx = rng.normal(size=shape)
        x = Parameter(x0.copy())
        out = op(x)
        u = rng.normal(size=out.data.shape)
        backward((out * Tensor(u)).sum())
        lhs = float(np.sum(jvp(x0, dx) * u))
        rhs = float(np.sum(dx * x.grad))
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))

    def test_upsample(self):
        self._adjoint(lambda t: upsample_nearest(t, 2),
                      lambda x, dx: np.repeat(np.repeat(dx, 2, 1), 2, 2), (2, 3, 3), 20)

    def test_gap(self):
        self._adjoint(global_avg_pool,
                      lambda x, dx: dx.mean(axis=(1, 2)).reshape(-1, 1, 1), (3, 4, 4), 21)

    def test_conv_wrt_input(self):
        w = np.random.default_rng(22).normal(size=(2, 2, 3, 3))
        self._adjoint(lambda t: conv2d(t, Tensor(w)),
                      lambda x, dx: naive_conv2d(dx, w, 1, 1), (2, 5, 5), 23)

    def test_relu(self):
        self._adjoint(relu, lambda x, dx: dx * (x > 0), (2, 4, 4), 24)

    def test_sigmoid(self):
        def jvp(x, dx):
            s = 1.0 / (1.0 + np.exp(-x))
            return s * (1 - s) * dx
        self._adjoint(sigmoid, jvp, (2, 4, 4), 25)


class TestDeterminism:
    def test_forward_bit_identical_across_runs(self):
        rng_data = np.random.default_rng(26).normal(size=(2, 8, 8))
        w_data = np.random.default_rng(27).normal(size=(3, 2, 3, 3))
        a = conv2d(Tensor(rng_data), Tensor(w_data), stride=2).data
        b = conv2d(Tensor(rng_data), Tensor(w_data), stride=2).data
        assert np.array_equal(a, b)
