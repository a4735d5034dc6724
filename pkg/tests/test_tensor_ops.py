import math

import numpy as np
import pytest
import scipy.special

from mixres import ops
from mixres.errors import ConfigError
from mixres.tensor import Tape, Tensor, backward

from oracles import direct_conv2d


def t(data, grad=False, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=grad)


class TestElementwise:
    def test_add_zero_is_identity(self):
        x = t([[1.0, -2.0], [3.0, 0.5]])
        out = ops.add(x, t(np.zeros((2, 2))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_sum_all(self):
        assert ops.sum_all(t([[1.0, 2.0], [3.0, 4.0]])).item() == 10.0

    def test_scale(self):
        np.testing.assert_allclose(ops.scale(t([2.0, -4.0]), 0.5).data, [1.0, -2.0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            ops.add(t(np.ones((2, 3))), t(np.ones((3, 2))))
        with pytest.raises(ValueError, match="shape mismatch"):
            ops.mul(t(np.ones((2, 3))), t(np.ones((2, 4))))

    def test_no_implicit_rank_broadcasting(self):
        # only exact-shape and scalar operands are allowed
        with pytest.raises(ValueError):
            ops.add(t(np.ones((2, 3))), t(np.ones(3)))

    def test_scalar_operand_allowed(self):
        out = ops.mul(t([[2.0, 4.0]]), t(3.0))
        np.testing.assert_allclose(out.data, [[6.0, 12.0]])

    def test_mixed_dtype_rejected(self):
        with pytest.raises(ValueError, match="mixed dtypes"):
            ops.add(t([1.0]), t([1.0], dtype=np.float64))


class TestBackward:
    def test_sum_gives_ones(self):
        x = t([1.0, 5.0, -2.0], grad=True)
        with Tape() as tape:
            loss = ops.sum_all(x)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones(3, dtype=np.float32))

    def test_sum_of_squares(self):
        x = t([1.0, 2.0], grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(x, x))
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_diamond_fanout_accumulates(self):
        x = t(3.0, grad=True)
        with Tape() as tape:
            y = ops.add(x, x)
        backward(tape, y)
        assert float(x.grad) == 2.0

    def test_non_scalar_loss_rejected(self):
        x = t([1.0, 2.0], grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            backward(tape, y)

    def test_two_cycles_identical_with_reset(self):
        x = t([0.3, -1.2, 2.0], grad=True)

        def run():
            x.zero_grad()
            with Tape() as tape:
                loss = ops.sum_all(ops.mul(ops.gelu(x), x))
            backward(tape, loss)
            return x.grad.copy()

        np.testing.assert_array_equal(run(), run())

    def test_grads_accumulate_across_backward_calls(self):
        x = t([1.0, 2.0], grad=True)
        for expected in ([1.0, 1.0], [2.0, 2.0]):
            with Tape() as tape:
                loss = ops.sum_all(x)
            backward(tape, loss)
            np.testing.assert_allclose(x.grad, expected)


class TestGelu:
    def test_zero(self):
        assert ops.gelu(t([0.0])).data[0] == 0.0

    def test_at_one(self):
        # x * Phi(x) at x=1, Phi(1) = 0.8413447
        np.testing.assert_allclose(ops.gelu(t([1.0])).data[0], 0.841345, atol=1e-5)

    def test_matches_scipy_reference(self, rng):
        x = rng.standard_normal(4096).astype(np.float32) * 3
        mine = ops.gelu(Tensor(x)).data
        ref = x * 0.5 * (1.0 + scipy.special.erf(x.astype(np.float64) / math.sqrt(2)))
        np.testing.assert_allclose(mine, ref, atol=2e-6)

    def test_erf_accuracy_against_scipy(self):
        grid = np.linspace(-10.0, 10.0, 200_001)
        assert np.max(np.abs(ops.erf(grid) - scipy.special.erf(grid))) < 5e-15
        grid32 = grid.astype(np.float32)
        assert np.max(np.abs(ops.erf(grid32) - scipy.special.erf(grid))) < 5e-7


class TestLogSoftmaxClamped:
    def test_uniform_logits(self):
        out = ops.log_softmax_clamped(t(np.zeros((2, 10))))
        np.testing.assert_allclose(out.data, np.log(0.1), atol=1e-6)

    def test_clamp_floor(self):
        out = ops.log_softmax_clamped(t([[100.0, 0.0]]))
        assert out.data[0, 1] == pytest.approx(math.log(1e-5), abs=1e-4)
        assert out.data[0, 0] == pytest.approx(0.0, abs=1e-6)

    def test_symmetry(self):
        out = ops.log_softmax_clamped(t([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, math.log(0.5), atol=1e-7)

    def test_outputs_bounded(self, rng):
        logits = Tensor(rng.standard_normal((64, 10)).astype(np.float32) * 30)
        out = ops.log_softmax_clamped(logits).data
        assert out.min() >= math.log(1e-5) - 1e-6
        assert out.max() <= 0.0

    def test_preclamp_rows_sum_to_one(self, rng):
        logits = rng.standard_normal((32, 7)).astype(np.float32) * 5
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            ops.log_softmax_clamped(t(np.zeros((3, 1))))

    def test_clamp_gates_gradient_when_saturated(self):
        # class 1 is clamped at the floor: its output is locally constant,
        # so a loss reading only that entry gets zero gradient
        logits = t([[100.0, 0.0]], grad=True)
        picker = t([[0.0, 1.0]])
        with Tape() as tape:
            loss = ops.sum_all(ops.mul(ops.log_softmax_clamped(logits), picker))
        backward(tape, loss)
        np.testing.assert_array_equal(logits.grad, np.zeros((1, 2), dtype=np.float32))


class TestLinear:
    def test_identity_weight(self):
        x = t([[1.0, 2.0], [3.0, 4.0]])
        out = ops.linear(x, t(np.eye(2)), t([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_computed(self):
        out = ops.linear(t([[1.0, 2.0]]), t([[3.0, 4.0]]), t([5.0]))
        assert out.data[0, 0] == 16.0

    def test_feature_mismatch(self):
        with pytest.raises(ValueError, match="feature mismatch"):
            ops.linear(t(np.ones((2, 3))), t(np.ones((4, 5))))


class TestGlobalAvgPool:
    def test_single_pixel_identity(self):
        x = t(np.arange(6, dtype=np.float32).reshape(1, 6, 1, 1))
        np.testing.assert_array_equal(ops.global_avg_pool(x).data, x.data.reshape(1, 6))

    def test_mean(self):
        x = t(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        assert ops.global_avg_pool(x).data[0, 0] == 2.5

    def test_channels_last_agrees(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        a = ops.global_avg_pool(Tensor(x)).data
        b = ops.global_avg_pool(Tensor(np.ascontiguousarray(x.transpose(0, 2, 3, 1))),
                                channels_last=True).data
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestConv2d:
    def test_identity_1x1(self):
        x = t(np.random.default_rng(0).standard_normal((2, 3, 5, 5)))
        w = t(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
        out = ops.conv2d(x, w)
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_all_ones_kernel_sums(self):
        x = t(np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3))
        w = t(np.ones((1, 1, 3, 3)))
        assert ops.conv2d(x, w).data.reshape(()) == 45.0

    def test_matches_direct_oracle_f64_bitwise(self, rng):
        for stride, padding in [(1, 0), (1, 1), (2, 1), (2, 0)]:
            x = rng.standard_normal((2, 4, 8, 8))
            w = rng.standard_normal((3, 4, 3, 3))
            b = rng.standard_normal(3)
            mine = ops.conv2d(Tensor(x), Tensor(w), Tensor(b),
                              stride=stride, padding=padding).data
            ref = direct_conv2d(x, w, b, stride=stride, padding=padding)
            assert np.array_equal(mine, ref), f"stride={stride} pad={padding}"

    def test_matches_direct_oracle_f32(self, rng):
        x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        w = rng.standard_normal((3, 4, 3, 3)).astype(np.float32)
        mine = ops.conv2d(Tensor(x), Tensor(w), stride=1, padding=1).data
        ref = direct_conv2d(x, w, stride=1, padding=1)
        np.testing.assert_allclose(mine, ref, rtol=1e-5, atol=1e-6)

    def test_channels_last_agrees_both_dtypes(self, rng):
        for dtype in (np.float32, np.float64):
            x = rng.standard_normal((2, 5, 9, 9)).astype(dtype)
            w = rng.standard_normal((4, 5, 3, 3)).astype(dtype)
            cf = ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
            cl = ops.conv2d(Tensor(np.ascontiguousarray(x.transpose(0, 2, 3, 1))),
                            Tensor(w), stride=2, padding=1, channels_last=True).data
            np.testing.assert_allclose(cf, cl.transpose(0, 3, 1, 2), rtol=1e-5, atol=1e-6)

    def test_channel_mismatch_error(self):
        with pytest.raises(ValueError, match="channels"):
            ops.conv2d(t(np.ones((1, 3, 4, 4))), t(np.ones((2, 4, 1, 1))))

    def test_kernel_larger_than_input_error(self):
        with pytest.raises(ConfigError, match="output size"):
            ops.conv2d(t(np.ones((1, 1, 2, 2))), t(np.ones((1, 1, 5, 5))))

    def test_bad_stride_padding(self):
        x, w = t(np.ones((1, 1, 4, 4))), t(np.ones((1, 1, 3, 3)))
        with pytest.raises(ConfigError):
            ops.conv2d(x, w, stride=0)
        with pytest.raises(ConfigError):
            ops.conv2d(x, w, padding=-1)


class TestBatchNorm:
    def test_constant_input_zero_output(self):
        x = t(np.full((2, 3, 4, 4), 7.0))
        out = ops.batch_norm2d(x, t(np.ones(3)), t(np.zeros(3)), ops.RunningStats(3), train=True)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-5)

    def test_two_value_channel(self):
        # values {1, 3}: mean 2, population std 1 -> outputs {-1, +1}
        x = t(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        out = ops.batch_norm2d(x, t(np.ones(1)), t(np.zeros(1)), ops.RunningStats(1),
                               train=True, eps=0.0)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-6)

    def test_eval_uses_running_stats(self):
        running = ops.RunningStats(1)
        running.mean[:] = 5.0
        running.var[:] = 4.0
        x = t(np.array([9.0]).reshape(1, 1, 1, 1))
        out = ops.batch_norm2d(x, t(np.ones(1)), t(np.zeros(1)), running, train=False, eps=0.0)
        assert out.data.reshape(()) == pytest.approx(2.0, abs=1e-6)

    def test_eval_does_not_touch_running_stats(self, rng):
        running = ops.RunningStats(3)
        before = (running.mean.copy(), running.var.copy())
        x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
        ops.batch_norm2d(x, t(np.ones(3)), t(np.zeros(3)), running, train=False)
        np.testing.assert_array_equal(running.mean, before[0])
        np.testing.assert_array_equal(running.var, before[1])

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            ops.batch_norm2d(t(np.ones((2, 3, 2, 2))), t(np.ones(4)), t(np.zeros(4)),
                             ops.RunningStats(4), train=True)

    def test_train_needs_two_values(self):
        with pytest.raises(ValueError, match="at least 2"):
            ops.batch_norm2d(t(np.ones((1, 3, 1, 1))), t(np.ones(3)), t(np.zeros(3)),
                             ops.RunningStats(3), train=True)

    def test_layouts_agree(self, rng):
        x = rng.standard_normal((4, 5, 6, 6)).astype(np.float32)
        gamma, beta = t(rng.uniform(0.5, 1.5, 5)), t(rng.standard_normal(5))
        a = ops.batch_norm2d(Tensor(x), gamma, beta, ops.RunningStats(5), train=True).data
        b = ops.batch_norm2d(Tensor(np.ascontiguousarray(x.transpose(0, 2, 3, 1))),
                             gamma, beta, ops.RunningStats(5), train=True,
                             channels_last=True).data
        np.testing.assert_allclose(a, b.transpose(0, 3, 1, 2), rtol=1e-4, atol=1e-5)
