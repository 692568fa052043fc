import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepfuse import layers
from deepfuse.layers import (
    BatchNorm2d,
    Conv2d,
    Fuse,
    GlobalAvgPool,
    MaxPool2,
    ReLU,
    ShapeError,
    avgpool_global,
    backward,
    batchnorm,
    conv2d,
    elementwise_fuse,
    linear_classifier,
    maxpool2,
    relu,
    softmax_xent,
)
from oracles import (
    avgpool_global_naive,
    conv2d_naive,
    linear_naive,
    max_rel_err,
    maxpool2_naive,
    numeric_grad,
)


def make_conv(in_ch, out_ch, ksize, rng, dtype=np.float64):
    conv = Conv2d(in_ch, out_ch, ksize, dtype=dtype)
    conv.w = rng.standard_normal(conv.w.shape).astype(dtype)
    conv.b = rng.standard_normal(conv.b.shape).astype(dtype)
    return conv


class TestConv2d:
    def test_catalog_shape(self):
        rng = np.random.default_rng(0)
        conv = make_conv(3, 32, 3, rng, dtype=np.float32)
        x = rng.standard_normal((100, 3, 32, 32)).astype(np.float32)
        y = conv2d(x, conv)
        assert y.shape == (100, 32, 32, 32)

    def test_identity_kernel(self):
        conv = Conv2d(1, 1, 3, dtype=np.float64)
        conv.w[1, 1, 0, 0] = 1.0
        x = np.random.default_rng(1).standard_normal((2, 1, 6, 6))
        y = conv2d(x, conv)
        np.testing.assert_allclose(y, x, atol=1e-12)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(2)
        conv = make_conv(2, 3, 3, rng)
        x = rng.standard_normal((1, 2, 4, 4))
        y = conv2d(x, conv)
        np.testing.assert_allclose(y, conv2d_naive(x, conv.w, conv.b, pad=1), atol=1e-6)

    def test_1x1_matches_oracle(self):
        rng = np.random.default_rng(3)
        conv = make_conv(4, 2, 1, rng)
        x = rng.standard_normal((2, 4, 3, 3))
        y = conv2d(x, conv)
        np.testing.assert_allclose(y, conv2d_naive(x, conv.w, conv.b, pad=0), atol=1e-12)

    def test_channel_mismatch_rejected(self):
        conv = Conv2d(3, 8, 3)
        x = np.zeros((1, 4, 8, 8), dtype=np.float32)
        with pytest.raises(ShapeError, match="channels"):
            conv2d(x, conv)

    def test_backward_before_forward_rejected(self):
        conv = Conv2d(3, 8, 3)
        with pytest.raises(RuntimeError, match="before forward"):
            conv.backward(np.zeros((1, 4, 4, 8), dtype=np.float32))


class TestMaxPool2:
    def test_halves_spatial(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 32, 32))
        y, mask = maxpool2(x)
        assert y.shape == (2, 3, 16, 16)
        assert mask.shape == (2, 3, 16, 16)

    def test_window_max(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        y, _ = maxpool2(x)
        assert y[0, 0, 0, 0] == 4.0

    def test_constant_input(self):
        x = np.full((1, 2, 4, 4), 7.5)
        y, _ = maxpool2(x)
        np.testing.assert_array_equal(y, np.full((1, 2, 2, 2), 7.5))

    def test_matches_oracle(self):
        x = np.random.default_rng(4).standard_normal((3, 4, 8, 8))
        y, _ = maxpool2(x)
        np.testing.assert_array_equal(y, maxpool2_naive(x))

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            maxpool2(np.zeros((1, 1, 5, 4)))


class TestAvgPoolGlobal:
    def test_constant_plane(self):
        x = np.full((2, 3, 8, 8), 5.0)
        y = avgpool_global(x)
        np.testing.assert_allclose(y, np.full((2, 3, 1, 1), 5.0))

    def test_single_hot_cell(self):
        x = np.zeros((1, 1, 8, 8))
        x[0, 0, 2, 5] = 1.0
        y = avgpool_global(x)
        np.testing.assert_allclose(y[0, 0, 0, 0], 1.0 / 64)

    def test_matches_oracle(self):
        x = np.random.default_rng(5).standard_normal((2, 3, 8, 8))
        np.testing.assert_allclose(avgpool_global(x), avgpool_global_naive(x), atol=1e-12)


class TestReLU:
    def test_definition(self):
        x = np.array([[[[-1.0]], [[0.0]], [[2.0]]]])
        np.testing.assert_array_equal(relu(x), [[[[0.0]], [[0.0]], [[2.0]]]])

    def test_all_negative(self):
        x = -np.abs(np.random.default_rng(6).standard_normal((2, 3, 4, 4))) - 0.1
        assert np.all(relu(x) == 0)

    def test_identity_on_nonnegative(self):
        x = np.abs(np.random.default_rng(7).standard_normal((2, 3, 4, 4)))
        np.testing.assert_array_equal(relu(x), x)

    def test_dead_unit_gradient(self):
        unit = ReLU()
        x = np.full((1, 2, 2, 1), -1.0)
        unit.forward(x)
        assert np.all(unit.backward(np.ones_like(x)) == 0)


class TestBatchNorm:
    def test_constant_input_centred(self):
        bn = BatchNorm2d(3, dtype=np.float64)
        x = np.full((4, 3, 5, 5), 2.5)
        y = batchnorm(x, bn, train=True)
        assert np.max(np.abs(y)) < 1e-2  # eps-dominated magnitude

    def test_normalization_fixed_point(self):
        rng = np.random.default_rng(8)
        bn = BatchNorm2d(3, dtype=np.float64)
        x = rng.standard_normal((50, 3, 8, 8))
        x -= x.mean(axis=(0, 2, 3), keepdims=True)
        x /= x.std(axis=(0, 2, 3), keepdims=True)
        y = batchnorm(x, bn, train=True)
        np.testing.assert_allclose(y, x, atol=1e-3)

    def test_train_output_statistics(self):
        rng = np.random.default_rng(9)
        bn = BatchNorm2d(4, dtype=np.float64)
        x = 3.0 * rng.standard_normal((20, 4, 6, 6)) + 1.5
        y = batchnorm(x, bn, train=True)
        mean = y.mean(axis=(0, 2, 3))
        var = y.var(axis=(0, 2, 3))
        assert np.max(np.abs(mean)) <= 1e-5
        np.testing.assert_allclose(var, 1.0, atol=1e-3)

    def test_eval_uses_running_stats(self):
        rng = np.random.default_rng(10)
        bn = BatchNorm2d(2, dtype=np.float64)
        for _ in range(200):
            batchnorm(3.0 * rng.standard_normal((16, 2, 4, 4)) + 1.0, bn, train=True)
        x = rng.standard_normal((4, 2, 4, 4))
        y = batchnorm(x, bn, train=False)
        expected = (x - bn.running_mean[None, :, None, None]) / np.sqrt(
            bn.running_var[None, :, None, None] + bn.EPS)
        np.testing.assert_allclose(y, expected, rtol=1e-10)


class TestLinearClassifier:
    def test_identity_weight(self):
        fc = Conv2d(4, 4, 1, dtype=np.float64)
        fc.w[0, 0] = np.eye(4)
        x = np.random.default_rng(11).standard_normal((3, 4, 1, 1))
        np.testing.assert_allclose(linear_classifier(x, fc), x, atol=1e-12)

    def test_zero_weight_bias_only(self):
        fc = Conv2d(4, 5, 1, dtype=np.float64)
        fc.b[:] = np.arange(5.0)
        x = np.random.default_rng(12).standard_normal((3, 4, 1, 1))
        y = linear_classifier(x, fc)
        for i in range(3):
            np.testing.assert_allclose(y[i, :, 0, 0], np.arange(5.0))

    def test_matches_dot_oracle(self):
        rng = np.random.default_rng(13)
        fc = make_conv(6, 4, 1, rng)
        x = rng.standard_normal((5, 6, 1, 1))
        np.testing.assert_allclose(linear_classifier(x, fc),
                                   linear_naive(x, fc.w, fc.b), atol=1e-12)

    def test_spatial_extent_rejected(self):
        fc = Conv2d(4, 4, 1)
        with pytest.raises(ShapeError, match="1x1"):
            linear_classifier(np.zeros((1, 4, 2, 2), dtype=np.float32), fc)


class TestSoftmaxXent:
    def test_uniform_scores(self):
        for k in (2, 10, 100):
            scores = np.zeros((4, k))
            loss, _ = softmax_xent(scores, np.zeros(4, dtype=int))
            assert loss == pytest.approx(np.log(k), rel=1e-12)

    def test_saturated_margin(self):
        scores = np.zeros((2, 5))
        scores[:, 3] = 80.0
        loss, _ = softmax_xent(scores, np.array([3, 3]))
        assert loss < 1e-12

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError, match="range"):
            softmax_xent(np.zeros((2, 3)), np.array([0, 3]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        scores = rng.standard_normal((6, 5))
        labels = rng.integers(0, 5, size=6)
        _, d = softmax_xent(scores, labels)
        num = numeric_grad(lambda: softmax_xent(scores, labels)[0], scores, h=1e-6)
        assert max_rel_err(d, num, floor=1e-4) < 1e-4

    def test_rank4_shape_passthrough(self):
        scores = np.random.default_rng(15).standard_normal((3, 7, 1, 1))
        loss, d = softmax_xent(scores, np.array([0, 1, 2]))
        assert d.shape == scores.shape


class TestFuse:
    def test_sum_additive_identity(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(elementwise_fuse("sum", [x, np.zeros_like(x)]), x)

    @pytest.mark.parametrize("kind", ["sum", "max", "concat"])
    def test_single_input_identity(self, kind):
        x = np.random.default_rng(17).standard_normal((2, 3, 4, 4))
        np.testing.assert_array_equal(elementwise_fuse(kind, [x]), x)

    def test_concat_channel_counts(self):
        rng = np.random.default_rng(18)
        a = rng.standard_normal((2, 32, 4, 4))
        b = rng.standard_normal((2, 48, 4, 4))
        y = elementwise_fuse("concat", [a, b])
        assert y.shape == (2, 80, 4, 4)
        np.testing.assert_array_equal(y[:, :32], a)
        np.testing.assert_array_equal(y[:, 32:], b)

    def test_shape_mismatch_rejected(self):
        a = np.zeros((2, 3, 4, 4))
        b = np.zeros((2, 3, 8, 8))
        with pytest.raises(ShapeError, match="input 1"):
            elementwise_fuse("sum", [a, b])

    def test_empty_rejected(self):
        with pytest.raises(ShapeError, match="at least one"):
            elementwise_fuse("sum", [])

    def test_sum_backward_copies_upstream(self):
        rng = np.random.default_rng(19)
        node = Fuse("sum")
        xs = [rng.standard_normal((2, 1, 3, 3)) for _ in range(3)]
        elementwise_fuse("sum", xs, node=node)
        dy = rng.standard_normal((2, 1, 3, 3))
        g = backward(node, dy)
        for branch in g.d_input:
            np.testing.assert_array_equal(branch, dy)

    def test_max_backward_routes_to_winner(self):
        node = Fuse("max")
        a = np.full((1, 1, 2, 2), 1.0)
        b = np.full((1, 1, 2, 2), 2.0)
        elementwise_fuse("max", [a, b], node=node)
        dy = np.full((1, 1, 2, 2), 3.0)
        g = backward(node, dy)
        assert np.all(g.d_input[0] == 0)
        np.testing.assert_array_equal(g.d_input[1], dy)

    def test_max_tie_breaks_to_lowest_index(self):
        node = Fuse("max")
        a = np.ones((1, 1, 2, 2))
        elementwise_fuse("max", [a, a.copy()], node=node)
        g = backward(node, np.ones_like(a))
        np.testing.assert_array_equal(g.d_input[0], np.ones_like(a))
        assert np.all(g.d_input[1] == 0)

    def test_concat_backward_slices(self):
        rng = np.random.default_rng(20)
        node = Fuse("concat")
        a = rng.standard_normal((1, 2, 3, 3))
        b = rng.standard_normal((1, 5, 3, 3))
        elementwise_fuse("concat", [a, b], node=node)
        dy = rng.standard_normal((1, 7, 3, 3))
        g = backward(node, dy)
        np.testing.assert_array_equal(g.d_input[0], dy[:, :2])
        np.testing.assert_array_equal(g.d_input[1], dy[:, 2:])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_sum_fusion_linearity(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (rng.standard_normal((2, 3, 4, 4)).astype(np.float32) for _ in range(3))
        lhs = elementwise_fuse("sum", [a + b, c])
        rhs = (elementwise_fuse("sum", [a, c])
               + elementwise_fuse("sum", [b, np.zeros_like(b)]))
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)


class TestDeterminism:
    def test_forward_bit_identical(self):
        rng = np.random.default_rng(21)
        conv = make_conv(3, 8, 3, rng, dtype=np.float32)
        bn = BatchNorm2d(8, dtype=np.float32)
        x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
        run = lambda: batchnorm(conv2d(x, conv), bn, train=False)
        np.testing.assert_array_equal(run(), run())


class TestGradientsAgainstFiniteDifferences:
    """Every op's analytic VJP vs central differences, double precision."""

    SEEDS = [101, 202, 303, 404, 505]

    def _check(self, node, x, rng, train=False, nudge=0.0):
        if nudge:
            x = x + np.where(x >= 0, nudge, -nudge)
        w = rng.standard_normal(node.forward(layers.nchw_to_nhwc(x), train=train).shape)
        w = layers.nhwc_to_nchw(w)

        def loss():
            y = node.forward(layers.nchw_to_nhwc(x), train=train)
            return float((layers.nhwc_to_nchw(y) * w).sum())

        loss()
        g = backward(node, w)
        num = numeric_grad(loss, x)
        assert max_rel_err(g.d_input, num) < 1e-4
        for name, analytic in g.d_params.items():
            arr = node.params()[name]
            num_p = numeric_grad(loss, arr)
            assert max_rel_err(analytic, num_p) < 1e-4, f"param {name}"

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv3x3(self, seed):
        rng = np.random.default_rng(seed)
        node = make_conv(2, 3, 3, rng)
        self._check(node, rng.standard_normal((2, 2, 5, 5)), rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv1x1(self, seed):
        rng = np.random.default_rng(seed)
        node = make_conv(3, 2, 1, rng)
        self._check(node, rng.standard_normal((2, 3, 4, 4)), rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batchnorm_train(self, seed):
        rng = np.random.default_rng(seed)
        node = BatchNorm2d(3, dtype=np.float64)
        node.gamma = rng.standard_normal(3)
        node.beta = rng.standard_normal(3)
        self._check(node, rng.standard_normal((4, 3, 4, 4)), rng, train=True)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batchnorm_eval(self, seed):
        rng = np.random.default_rng(seed)
        node = BatchNorm2d(3, dtype=np.float64)
        node.running_mean = rng.standard_normal(3)
        node.running_var = np.abs(rng.standard_normal(3)) + 0.5
        self._check(node, rng.standard_normal((4, 3, 4, 4)), rng, train=False)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu(self, seed):
        rng = np.random.default_rng(seed)
        self._check(ReLU(), rng.standard_normal((2, 3, 5, 5)), rng, nudge=0.01)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_maxpool(self, seed):
        rng = np.random.default_rng(seed)
        self._check(MaxPool2(), rng.standard_normal((2, 2, 6, 6)), rng)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_avgpool_global(self, seed):
        rng = np.random.default_rng(seed)
        self._check(GlobalAvgPool(), rng.standard_normal((2, 3, 4, 4)), rng)

    @pytest.mark.parametrize("seed", SEEDS[:3])
    @pytest.mark.parametrize("kind", ["sum", "max", "concat"])
    def test_fuse(self, kind, seed):
        rng = np.random.default_rng(seed)
        node = Fuse(kind)
        xs = [rng.standard_normal((2, 2, 3, 3)) for _ in range(3)]
        y = node.forward([layers.nchw_to_nhwc(t) for t in xs])
        w = layers.nhwc_to_nchw(rng.standard_normal(y.shape))

        def loss():
            out = node.forward([layers.nchw_to_nhwc(t) for t in xs])
            return float((layers.nhwc_to_nchw(out) * w).sum())

        loss()
        g = backward(node, w)
        for t, analytic in zip(xs, g.d_input):
            num = numeric_grad(loss, t)
            assert max_rel_err(analytic, num) < 1e-4
