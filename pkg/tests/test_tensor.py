import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resfri import tensor as T
from resfri.gradcheck import OP_CASES, check_leaves, check_op, rel_error
from resfri.tensor import BatchNormState, ConvParams, ShapeError, Tensor


def t(values, **kw):
    return Tensor(np.asarray(values, dtype=np.float64), **kw)


def bn_state(c, gamma=1.0, beta=0.0, mean=0.0, var=1.0, mode="train", eps=1e-5):
    return BatchNormState(t(np.full(c, gamma)), t(np.full(c, beta)), np.full(c, mean, dtype=np.float64),
                          np.full(c, var, dtype=np.float64), mode=mode, epsilon=eps)


class TestTensorType:
    def test_extents_must_be_positive(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_rank_at_most_four(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_default_precision_is_float32(self):
        assert Tensor([1, 2]).dtype == np.float32
        assert Tensor(np.zeros(2)).dtype == np.float64

    def test_grad_shape_matches(self):
        x = t(np.ones((2, 3)), requires_grad=True)
        x.sum().backward()
        assert x.grad.shape == x.shape


class TestConv:
    def test_scalar_kernel_doubles(self):
        out = T.conv2d(t(np.ones((1, 1, 3, 3))), ConvParams(t([[[[2.0]]]]), t([0.0])))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_hand_cross_correlation(self):
        x = t([[[[1, 2], [3, 4]]]])
        w = t([[[[1, 0], [0, 1]]]])
        out = T.conv2d(x, ConvParams(w, t([0.0])))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 5.0

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_identity_kernel_is_exact(self, dtype):
        x = np.random.default_rng(0).standard_normal((2, 3, 7, 5)).astype(dtype)
        w = np.zeros((3, 3, 3, 3), dtype)
        for c in range(3):
            w[c, c, 1, 1] = 1
        out = T.conv2d(Tensor(x), ConvParams(Tensor(w), Tensor(np.zeros(3, dtype)), 1, 1))
        np.testing.assert_array_equal(out.data, x)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(ShapeError, match="channels"):
            T.conv2d(t(np.ones((1, 2, 4, 4))), ConvParams(t(np.ones((1, 3, 1, 1)))))

    def test_output_extent_below_one(self):
        with pytest.raises(ShapeError, match="extent"):
            T.conv2d(t(np.ones((1, 1, 2, 2))), ConvParams(t(np.ones((1, 1, 5, 5)))))

    def test_bias_length_checked(self):
        with pytest.raises(ShapeError):
            ConvParams(t(np.ones((2, 1, 1, 1))), t(np.ones(3)))

    @given(k=st.sampled_from([1, 3, 5]), s=st.sampled_from([1, 2]), p=st.sampled_from([0, 1, 2]),
           h=st.integers(5, 32), w=st.integers(5, 32))
    @settings(max_examples=60, deadline=None)
    def test_closed_form_shape(self, k, s, p, h, w):
        out = T.conv2d(Tensor(np.zeros((1, 2, h, w))), ConvParams(Tensor(np.zeros((3, 2, k, k))), None, s, p))
        assert out.shape == (1, 3, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


class TestPool:
    def test_avg_hand_mean(self):
        assert T.pool2d(t([[[[1, 2], [3, 4]]]]), "avg", 2, 2).data.item() == 2.5

    def test_max_hand_max(self):
        assert T.pool2d(t([[[[1, 2], [3, 4]]]]), "max", 2, 2).data.item() == 4.0

    def test_unit_avg_window_identity(self):
        x = np.random.default_rng(1).standard_normal((2, 3, 4, 5))
        np.testing.assert_array_equal(T.pool2d(Tensor(x), "avg", 1, 1, 0).data, x)

    def test_avg_counts_padding(self):
        out = T.pool2d(t(np.ones((1, 1, 2, 2))), "avg", 3, 1, 1)
        # each corner window covers four ones out of nine slots
        np.testing.assert_allclose(out.data, np.full((1, 1, 2, 2), 4 / 9))

    def test_max_ignores_padding(self):
        out = T.pool2d(t(-np.ones((1, 1, 3, 3))), "max", 3, 1, 1)
        np.testing.assert_array_equal(out.data, -np.ones((1, 1, 3, 3)))

    def test_invalid_kind(self):
        with pytest.raises(ValueError):
            T.pool2d(t(np.ones((1, 1, 2, 2))), "median", 2)

    def test_window_larger_than_input(self):
        with pytest.raises(ShapeError):
            T.pool2d(t(np.ones((1, 1, 2, 2))), "avg", 5)

    @given(k=st.sampled_from([1, 3, 5]), s=st.sampled_from([1, 2]), p=st.sampled_from([0, 1, 2]),
           h=st.integers(5, 32), kind=st.sampled_from(["max", "avg"]))
    @settings(max_examples=60, deadline=None)
    def test_closed_form_shape(self, k, s, p, h, kind):
        x = Tensor(np.zeros((1, 2, h, h)))
        if kind == "max" and p > k // 2:
            with pytest.raises(ShapeError):
                T.pool2d(x, kind, k, s, p)
            return
        assert T.pool2d(x, kind, k, s, p).shape == (1, 2, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)


class TestBatchNorm:
    def test_eval_identity(self):
        x = np.random.default_rng(2).standard_normal((2, 3, 4, 4))
        out = T.batchnorm2d(Tensor(x), bn_state(3, mode="eval"))
        np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-12)
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_train_two_values(self):
        x = t(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        out = T.batchnorm2d(x, bn_state(1, eps=1e-12))
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-9)

    def test_eval_zero_gamma(self):
        out = T.batchnorm2d(t(np.random.default_rng(3).standard_normal((2, 2, 3, 3))),
                            bn_state(2, gamma=0.0, beta=7.0, mode="eval"))
        np.testing.assert_array_equal(out.data, 7.0)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.batchnorm2d(t(np.ones((1, 2, 2, 2))), bn_state(3))

    def test_train_output_standardized_float32(self):
        x = np.random.default_rng(4).normal(3.0, 2.5, (8, 4, 6, 6)).astype(np.float32)
        st32 = BatchNormState(Tensor(np.ones(4, np.float32)), Tensor(np.zeros(4, np.float32)),
                              np.zeros(4, np.float32), np.ones(4, np.float32))
        out = T.batchnorm2d(Tensor(x), st32).data
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-4
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-4

    def test_running_stats_update(self):
        x = np.random.default_rng(5).standard_normal((4, 2, 3, 3)) + 2.0
        s = bn_state(2)
        T.batchnorm2d(Tensor(x), s)
        m = 4 * 9
        np.testing.assert_allclose(s.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(s.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))

    def test_invalid_state(self):
        with pytest.raises(ValueError):
            bn_state(2, eps=0.0)
        with pytest.raises(ShapeError):
            BatchNormState(t(np.ones(2)), t(np.ones(3)), np.zeros(2), np.ones(2))


class TestElementwise:
    def test_relu_examples(self):
        np.testing.assert_array_equal(T.relu(t([-1, 0, 2])).data, [0, 0, 2])
        np.testing.assert_array_equal(T.relu(t(-np.ones(4) * 3)).data, np.zeros(4))
        np.testing.assert_array_equal(T.relu(t([1.5, 2.0])).data, [1.5, 2.0])

    def test_add_examples(self):
        x = np.random.default_rng(6).standard_normal((2, 3))
        np.testing.assert_array_equal(T.add(Tensor(x), Tensor(np.zeros_like(x))).data, x)
        np.testing.assert_array_equal(T.add(Tensor(x), T.neg(Tensor(x))).data, np.zeros_like(x))
        np.testing.assert_array_equal(T.add(t([1, 2]), t([3, 4])).data, [4, 6])

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(t([1, 2]), t([1, 2, 3]))


class TestConcat:
    def test_single_part_identity(self):
        x = t(np.ones((1, 2, 3, 3)))
        assert T.concat_channels([x]) is x

    def test_layout(self):
        a = t(np.ones((1, 2, 2, 2)))
        b = t(np.zeros((1, 3, 2, 2)))
        out = T.concat_channels([a, b])
        assert out.shape[1] == 5
        np.testing.assert_array_equal(out.data[:, :2], 1)
        np.testing.assert_array_equal(out.data[:, 2:], 0)

    def test_round_trip(self):
        x = np.random.default_rng(7).standard_normal((2, 3, 2, 2))
        joined = T.concat_channels([Tensor(x), Tensor(np.zeros((2, 4, 2, 2)))])
        np.testing.assert_array_equal(T.slice_channels(joined, 0, 3).data, x)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat_channels([t(np.ones((1, 1, 2, 2))), t(np.ones((1, 1, 3, 2)))])


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(8).standard_normal((3, 4))
        np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_zero_weight(self):
        out = T.linear(t(np.ones((3, 2))), t(np.zeros((2, 4))), t([1, 2, 3, 4]))
        np.testing.assert_array_equal(out.data, np.tile([1, 2, 3, 4], (3, 1)))

    def test_hand(self):
        assert T.linear(t([[1, 2]]), t([[1], [1]]), t([0])).data.item() == 3.0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            T.linear(t(np.ones((1, 3))), t(np.ones((2, 2))))


class TestLoss:
    def test_uniform_logits(self):
        loss = T.softmax_cross_entropy(t(np.zeros((4, 10))), [0, 3, 5, 9])
        assert loss.data.item() == pytest.approx(math.log(10), abs=1e-6)
        assert loss.data.item() == pytest.approx(2.302585, abs=1e-6)

    def test_saturated(self):
        z = np.zeros((1, 5))
        z[0, 2] = 1000
        assert T.softmax_cross_entropy(t(z), [2]).data.item() == pytest.approx(0.0, abs=1e-12)

    def test_two_class_gradient(self):
        z = t([[0.0, 0.0]], requires_grad=True)
        loss = T.softmax_cross_entropy(z, [0])
        loss.backward()
        assert loss.data.item() == pytest.approx(math.log(2))
        np.testing.assert_allclose(z.grad, [[-0.5, 0.5]])
        z2 = t([[0.0, 0.0], [0.0, 0.0]], requires_grad=True)
        T.softmax_cross_entropy(z2, [0, 0]).backward()
        np.testing.assert_allclose(z2.grad, [[-0.25, 0.25], [-0.25, 0.25]])

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            T.softmax_cross_entropy(t(np.zeros((1, 3))), [3])


class TestBackward:
    def test_scaled_sum(self):
        x = t(np.random.default_rng(9).standard_normal((2, 3)), requires_grad=True)
        T.tsum(T.mul(x, 2.0)).backward()
        np.testing.assert_array_equal(x.grad, 2.0)

    def test_square(self):
        x = t([3.0], requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        assert x.grad.item() == 6.0

    def test_two_uses_sum(self):
        x = t([1.0, 2.0], requires_grad=True)
        y = T.add(T.tsum(T.mul(x, 3.0)).reshape((1,)), T.tsum(T.mul(x, x)).reshape((1,)))
        T.tsum(y).backward()
        np.testing.assert_allclose(x.grad, [3 + 2, 3 + 4])

    def test_non_scalar_root(self):
        x = t([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            T.mul(x, 2.0).backward()

    def test_second_backward_is_error(self):
        x = t([1.0, 2.0], requires_grad=True)
        y = T.tsum(x)
        y.backward()
        with pytest.raises(RuntimeError):
            y.backward()
        with pytest.raises(RuntimeError, match="already holds a gradient"):
            T.tsum(x).backward()
        x.zero_grad()
        T.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, [1, 1])

    def test_cycle_detected(self):
        x = t([1.0], requires_grad=True)
        y = T.mul(x, 2.0)
        z = T.mul(y, 2.0)
        y._parents = (z,)
        with pytest.raises(RuntimeError, match="cycle"):
            T.tsum(z).backward()

    def test_no_grad(self):
        x = t([1.0], requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert not y.requires_grad


class TestFiniteDiff:
    def test_sum_gives_ones(self):
        x = np.random.default_rng(10).standard_normal((2, 3))
        np.testing.assert_allclose(T.finite_diff_grad(T.tsum, x), np.ones_like(x), rtol=1e-8)

    def test_sum_of_squares(self):
        g = T.finite_diff_grad(lambda v: T.tsum(T.mul(v, v)), np.array([1.0, 2.0]))
        np.testing.assert_allclose(g, [2.0, 4.0], rtol=1e-8)

    def test_conv_bn_relu_chain_matches_backward(self):
        rng = np.random.default_rng(11)
        w = rng.standard_normal((3, 2, 3, 3))
        x = rng.standard_normal((2, 2, 5, 5))

        def f(v):
            y = T.conv2d(v, ConvParams(Tensor(w), None, 1, 1))
            return T.tsum(T.mul(T.relu(T.batchnorm2d(y, bn_state(3))), 1.0))

        xt = Tensor(x, requires_grad=True)
        f(xt).backward()
        num = T.finite_diff_grad(f, x)
        assert np.abs(xt.grad - num).max() / np.abs(num).max() < 1e-6


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradcheck_f64(name):
    res = check_op(name, "f64", trials=20, seed=0)
    assert res.passed, res.line()


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradcheck_f32(name):
    res = check_op(name, "f32", trials=20, seed=0)
    assert res.passed, res.line()


def _leaky_scaled(x: Tensor, slope: float) -> Tensor:
    data = np.where(x.data > 0, x.data, 0.1 * x.data)
    return T._result(data, (x,), lambda g: (g * np.where(x.data > 0, slope, 0.1),))


def test_gradcheck_rejects_wrong_backward():
    x = np.random.default_rng(5).standard_normal((3, 4))
    fn = lambda L, s: T.tsum(T.mul(_leaky_scaled(L["x"], s), Tensor(np.arange(12.0).reshape(3, 4))))
    assert check_leaves(lambda L: fn(L, 1.0), {"x": x}, np.float64) < 1e-6
    assert check_leaves(lambda L: fn(L, 1.001), {"x": x}, np.float64) > 1e-5


def test_rel_error_takes_closest_estimate():
    a = np.array([1.0, 2.0])
    assert rel_error([(a, (np.array([1.0, 2.5]), np.array([1.5, 2.0])))]) == 0.0
    assert rel_error([(a, np.array([1.0, 2.5]))]) == pytest.approx(0.2)


def test_forward_bitwise_across_thread_counts():
    from threadpoolctl import threadpool_limits

    from resfri.backbone import build_network

    x = Tensor(np.random.default_rng(12).standard_normal((2, 3, 32, 32)).astype(np.float32))
    outs = []
    for n in (1, 4):
        with threadpool_limits(limits=n):
            model = build_network("toy-mnist")
            model.eval()
            outs.append(model(x).data.copy())
    np.testing.assert_array_equal(outs[0], outs[1])
