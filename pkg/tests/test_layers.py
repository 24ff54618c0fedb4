import math

import numpy as np
import pytest

from cxrnet import layers as L
from cxrnet.errors import InvalidArgumentError, ShapeError
from cxrnet.tensor import Tensor, grad_check
from conftest import t64, weighted_sum


def conv_loop_oracle(x, w, b, stride, pad, groups):
    """Direct seven-nested-loop grouped cross-correlation."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    og = o // groups
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(oh):
                for j in range(ow):
                    s = 0.0 if b is None else b[oc]
                    for ci in range(cg):
                        for p in range(kh):
                            for q in range(kw):
                                s += xp[ni, g * cg + ci, i * stride + p, j * stride + q] * w[oc, ci, p, q]
                    out[ni, oc, i, j] = s
    return out


def random_conv_case(rng):
    groups = int(rng.integers(1, 4))
    cg, og = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
    x = rng.normal(size=(int(rng.integers(1, 3)), groups * cg, h, w))
    wt = rng.normal(size=(groups * og, cg, k, k))
    b = rng.normal(size=groups * og) if rng.random() < 0.5 else None
    return x, wt, b, stride, pad, groups


class TestConv2d:
    def test_identity_1x1(self, np_rng):
        x = np_rng.normal(size=(2, 4, 5, 5))
        w = np.eye(4).reshape(4, 4, 1, 1)
        np.testing.assert_array_equal(L.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_all_ones_sum(self):
        out = L.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3)))).data
        assert out.shape == (1, 1, 3, 3) and np.all(out == 9)

    def test_grouped_strided_vs_loop_oracle(self, np_rng):
        x = np_rng.normal(size=(1, 4, 7, 7))
        w = np_rng.normal(size=(4, 2, 3, 3))
        got = L.conv2d(Tensor(x), Tensor(w), stride=2, groups=2).data
        np.testing.assert_allclose(got, conv_loop_oracle(x, w, None, 2, 0, 2), rtol=1e-5, atol=1e-12)

    def test_random_cases_vs_loop_oracle(self, np_rng):
        for _ in range(10):
            x, w, b, s, p, g = random_conv_case(np_rng)
            got = L.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), s, p, g).data
            np.testing.assert_allclose(got, conv_loop_oracle(x, w, b, s, p, g), rtol=1e-5, atol=1e-12)

    def test_grouped_equals_independent_single_group_convs(self, np_rng):
        x = np_rng.normal(size=(2, 6, 6, 6))
        w = np_rng.normal(size=(9, 2, 3, 3))
        grouped = L.conv2d(Tensor(x), Tensor(w), stride=1, padding=1, groups=3).data
        parts = [L.conv2d(Tensor(x[:, 2 * k:2 * k + 2]), Tensor(w[3 * k:3 * k + 3]), padding=1, groups=1).data
                 for k in range(3)]
        np.testing.assert_allclose(grouped, np.concatenate(parts, axis=1), rtol=1e-12)

    def test_linearity(self, np_rng):
        w = Tensor(np_rng.normal(size=(4, 2, 3, 3)))
        x, y = np_rng.normal(size=(2, 2, 2, 6, 6))
        a, b = 0.7, -1.3
        lhs = L.conv2d(Tensor(a * x + b * y), w, padding=1, groups=1).data if False else \
            L.conv2d(Tensor(a * x + b * y), Tensor(w.data[:, :1].repeat(2, axis=1)), padding=1).data
        w2 = Tensor(w.data[:, :1].repeat(2, axis=1))
        rhs = a * L.conv2d(Tensor(x), w2, padding=1).data + b * L.conv2d(Tensor(y), w2, padding=1).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_divisibility_error(self):
        with pytest.raises(ShapeError):
            L.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 1, 1))), groups=2)

    def test_non_positive_extent(self):
        with pytest.raises(ShapeError):
            L.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_gradients(self, np_rng):
        for _ in range(3):
            x, w, b, s, p, g = random_conv_case(np_rng)
            params = [t64(x), t64(w)] + ([] if b is None else [t64(b)])
            probe = np_rng.normal(size=conv_loop_oracle(x, w, b, s, p, g).shape)

            def f(x, w, b=None):
                return weighted_sum(L.conv2d(x, w, b, s, p, g), probe)

            assert grad_check(f, params) < 1e-4


def bn_params(c, rng=None):
    gamma = t64(rng.normal(size=c) if rng is not None else np.ones(c))
    beta = t64(rng.normal(size=c) if rng is not None else np.zeros(c))
    return gamma, beta, t64(np.zeros(c), False), t64(np.ones(c), False)


class TestBatchNorm:
    def test_normalised_input_passes_through(self, np_rng):
        x = np_rng.normal(size=(4, 3, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = L.batchnorm(Tensor(x), *bn_params(3), training=True).data
        assert np.abs(out - x).max() < 1e-3

    def test_gamma_zero_gives_beta(self, np_rng):
        g, b, rm, rv = bn_params(3, np_rng)
        g.data[:] = 0
        out = L.batchnorm(Tensor(np_rng.normal(size=(2, 3, 4, 4))), g, b, rm, rv, training=True).data
        np.testing.assert_array_equal(out, np.broadcast_to(b.data.reshape(1, 3, 1, 1), out.shape))

    def test_vs_direct_statistics(self, np_rng):
        x = np_rng.normal(2.0, 3.0, size=(5, 4, 3, 3))
        g, b, rm, rv = bn_params(4, np_rng)
        out = L.batchnorm(Tensor(x), g, b, rm, rv, training=True, momentum=0.9, epsilon=1e-5).data
        for c in range(4):
            vals = x[:, c].ravel()
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            expect = g.data[c] * (x[:, c] - mu) / math.sqrt(var + 1e-5) + b.data[c]
            np.testing.assert_allclose(out[:, c], expect, atol=1e-5)
            assert rm.data[c] == pytest.approx(0.1 * mu)
            assert rv.data[c] == pytest.approx(0.9 + 0.1 * var)

    def test_constant_channel_no_division_by_zero(self):
        out = L.batchnorm(Tensor(np.full((2, 1, 3, 3), 4.0)), *bn_params(1), training=True).data
        assert np.all(np.isfinite(out)) and np.all(out == 0)

    def test_inference_uses_running_stats(self, np_rng):
        g, b, rm, rv = bn_params(2)
        rm.data[:] = [1.0, -2.0]
        rv.data[:] = [4.0, 0.25]
        x = np_rng.normal(size=(3, 2, 2, 2))
        out = L.batchnorm(Tensor(x), g, b, rm, rv, training=False).data
        expect = (x - rm.data.reshape(1, 2, 1, 1)) / np.sqrt(rv.data.reshape(1, 2, 1, 1) + 1e-5)
        np.testing.assert_allclose(out, expect, rtol=1e-12)

    def test_inference_twice_is_idempotent_up_to_epsilon(self, np_rng):
        x = np_rng.normal(size=(3, 2, 4, 4))
        params = bn_params(2)
        once = L.batchnorm(Tensor(x), *params, training=False).data
        twice = L.batchnorm(Tensor(once), *params, training=False).data
        bound = np.abs(once) * (1 - 1 / math.sqrt(1 + 1e-5)) + 1e-15
        assert np.all(np.abs(twice - once) <= bound)

    def test_inference_is_affine(self, np_rng):
        g, b, rm, rv = bn_params(2, np_rng)
        rv.data[:] = [2.0, 0.5]
        x1, x2 = np_rng.normal(size=(2, 1, 2, 3, 3))
        f = lambda x: L.batchnorm(Tensor(x), g, b, rm, rv, training=False).data
        np.testing.assert_allclose(f(0.3 * x1 + 0.7 * x2), 0.3 * f(x1) + 0.7 * f(x2), atol=1e-12)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, np_rng, training):
        x = t64(np_rng.normal(size=(3, 2, 3, 3)))
        g, b, rm, rv = bn_params(2, np_rng)
        rv.data[:] = [1.5, 0.7]
        probe = np_rng.normal(size=x.shape)
        f = lambda x, g, b: weighted_sum(L.batchnorm(x, g, b, rm, rv, training), probe)
        assert grad_check(f, [x, g, b]) < 1e-4


class TestPoolingAndActivations:
    def test_gap_constant(self):
        out = L.global_avg_pool(Tensor(np.full((2, 3, 4, 5), 2.5))).data
        np.testing.assert_array_equal(out, np.full((2, 3), 2.5))

    def test_gap_single_pixel_identity(self, np_rng):
        x = np_rng.normal(size=(2, 3, 1, 1))
        np.testing.assert_array_equal(L.global_avg_pool(Tensor(x)).data, x[:, :, 0, 0])

    def test_gap_3x3_hand_sum(self, np_rng):
        x = np_rng.normal(size=(1, 2, 3, 3))
        for c in range(2):
            s = sum(x[0, c, i, j] for i in range(3) for j in range(3))
            assert abs(L.global_avg_pool(Tensor(x)).data[0, c] - s / 9) < 1e-6

    def test_activation_values(self):
        np.testing.assert_array_equal(L.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])
        assert L.sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5
        assert L.tanh_act(Tensor(np.array([0.0]))).data[0] == 0.0

    def test_sigmoid_extremes_finite(self):
        s = L.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
        assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0

    @pytest.mark.parametrize("op", [L.relu, L.sigmoid, L.tanh_act, L.global_avg_pool])
    def test_gradients(self, np_rng, op):
        x = t64(np_rng.normal(size=(2, 3, 2, 2)))
        probe = np_rng.normal(size=op(x).shape)
        assert grad_check(lambda x: weighted_sum(op(x), probe), x) < 1e-4


class TestFc:
    def test_identity(self, np_rng):
        x = np_rng.normal(size=(3, 4))
        np.testing.assert_array_equal(L.fc(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)

    def test_zero_input_gives_bias(self):
        out = L.fc(Tensor(np.zeros((2, 3))), Tensor(np.ones((4, 3))), Tensor(np.arange(4.0))).data
        np.testing.assert_array_equal(out, np.tile(np.arange(4.0), (2, 1)))

    def test_vs_matmul(self, np_rng):
        x, w, b = np_rng.normal(size=(5, 3)), np_rng.normal(size=(2, 3)), np_rng.normal(size=2)
        np.testing.assert_array_equal(L.fc(Tensor(x), Tensor(w), Tensor(b)).data, x @ w.T + b)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            L.fc(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_gradients(self, np_rng):
        x, w, b = t64(np_rng.normal(size=(3, 4))), t64(np_rng.normal(size=(2, 4))), t64(np_rng.normal(size=2))
        probe = np_rng.normal(size=(3, 2))
        assert grad_check(lambda x, w, b: weighted_sum(L.fc(x, w, b), probe), [x, w, b]) < 1e-4


class TestSoftmaxXent:
    def test_uniform_logits(self):
        loss, probs = L.softmax_xent(Tensor(np.zeros((4, 3))), np.eye(3)[[0, 1, 2, 0]])
        assert abs(float(loss.data) - math.log(3)) < 1e-6
        np.testing.assert_allclose(probs, 1 / 3)

    def test_saturation(self):
        logits = np.zeros((1, 3))
        logits[0, 1] = 1000.0
        loss, _ = L.softmax_xent(Tensor(logits), np.array([[0, 1, 0]]))
        assert float(loss.data) < 1e-6

    def test_vs_direct_formula(self, np_rng):
        z = np_rng.normal(size=(2, 3))
        y = np.array([[0, 0, 1], [1, 0, 0]])
        loss, probs = L.softmax_xent(Tensor(z), y)
        expect = 0.0
        for r in range(2):
            denom = sum(math.exp(v) for v in z[r])
            k = int(np.argmax(y[r]))
            expect += -math.log(math.exp(z[r, k]) / denom) / 2
            for c in range(3):
                assert abs(probs[r, c] - math.exp(z[r, c]) / denom) < 1e-6
        assert abs(float(loss.data) - expect) < 1e-6

    def test_probability_rows(self, np_rng):
        _, probs = L.softmax_xent(Tensor(np_rng.normal(size=(6, 4)) * 20), np.eye(4)[[0, 1, 2, 3, 0, 1]])
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("labels", [[[0.5, 0.5, 0]], [[1, 1, 0]], [[0, 0, 0]], [[2, 0, 0]]])
    def test_non_one_hot_rejected(self, labels):
        with pytest.raises(InvalidArgumentError):
            L.softmax_xent(Tensor(np.zeros((1, 3))), np.array(labels, dtype=float))

    def test_gradients(self, np_rng):
        z = t64(np_rng.normal(size=(4, 3)))
        y = np.eye(3)[[2, 0, 1, 1]]
        assert grad_check(lambda z: L.softmax_xent(z, y)[0], z) < 1e-4
