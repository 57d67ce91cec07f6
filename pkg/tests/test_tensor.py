import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedconv import tensor as T
from fedconv.errors import ConfigurationError, InputError, NumericalError, UsageError
from gradcheck import check_op


def t(a, rg=False):
    return T.Tensor(np.asarray(a, dtype=float), requires_grad=rg)


class TestConv2d:
    def test_sum_of_ones(self):
        out = T.conv2d(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    def test_shape_of_compression_slice(self):
        out = T.conv2d(t(np.zeros((1, 1, 32, 16))), t(np.zeros((1, 1, 9, 5))))
        assert out.shape == (1, 1, 24, 12)

    def test_strided_corner_kernel(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        k = np.array([[1.0, 0.0], [0.0, 0.0]]).reshape(1, 1, 2, 2)
        out = T.conv2d(t(x), t(k), stride=2)
        np.testing.assert_array_equal(out.data[0, 0], [[0, 2], [8, 10]])

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 6, 5))
        k = rng.normal(size=(4, 3, 3, 2))
        s, p = 2, 1
        out = T.conv2d(t(x), t(k), stride=s, padding=p).data
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        ho = (6 + 2 * p - 3) // s + 1
        wo = (5 + 2 * p - 2) // s + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        ref[n, o, i, j] = np.sum(xp[n, :, i * s:i * s + 3, j * s:j * s + 2] * k[o])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_grouped_equals_separate_convs(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 3, 7, 6))
        k = rng.normal(size=(3, 1, 3, 2))
        out = T.conv2d(t(x), t(k), groups=3).data
        for g in range(3):
            ref = T.conv2d(t(x[:, g:g + 1]), t(k[g:g + 1])).data
            np.testing.assert_allclose(out[:, g:g + 1], ref, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigurationError):
            T.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 2, 2))))

    def test_kernel_too_large(self):
        with pytest.raises(ConfigurationError):
            T.conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 3, 3))))


class TestTransposedConv2d:
    def test_shape_of_dilation_slice(self):
        out = T.transposed_conv2d(t(np.zeros((1, 1, 24, 12))), t(np.zeros((1, 1, 9, 5))))
        assert out.shape == (1, 1, 32, 16)

    def test_delta_reproduces_kernel(self):
        k = np.random.default_rng(2).normal(size=(1, 1, 3, 3))
        out = T.transposed_conv2d(t(np.ones((1, 1, 1, 1))), t(k))
        np.testing.assert_array_equal(out.data, k)

    @pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (2, 0, 1), (2, 1, 1), (3, 2, 1), (1, 0, 2), (2, 1, 3)])
    def test_adjoint_inner_product(self, stride, padding, groups):
        rng = np.random.default_rng(stride * 10 + padding + groups)
        cin, cout = 2 * groups, 3 * groups
        # sizes chosen so the shape law is exact: H = (H' - 1) s - 2p + k
        h, w = 3 * stride - 2 * padding + 3, 4 * stride - 2 * padding + 2
        a = rng.normal(size=(2, cin, h, w))
        k = rng.normal(size=(cout, cin // groups, 3, 2))
        y = T.conv2d(t(a), t(k), stride, padding, groups).data
        b = rng.normal(size=y.shape)
        back = T.transposed_conv2d(t(b), t(k), stride, padding, groups).data
        assert back.shape == a.shape
        lhs = float(np.sum(y * b))
        rhs = float(np.sum(a * back))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_negative_output_size(self):
        with pytest.raises(ConfigurationError):
            T.transposed_conv2d(t(np.zeros((1, 1, 1, 1))), t(np.zeros((1, 1, 1, 1))), padding=1)


class TestActivations:
    def test_mlr_values(self):
        x = t([0.0, 2.0, -4.0])
        np.testing.assert_allclose(T.mlr(x, 0.85, 0.001).data, [0.0, 1.70, -0.004], rtol=0, atol=1e-15)

    def test_mlr_subgradient_at_zero_is_positive_slope(self):
        x = t([0.0], rg=True)
        g = T.grad(T.sum(T.mlr(x, 0.85, 0.001)), {"x": x})["x"]
        assert g[0] == 0.85


class TestWeightNorm:
    def test_unit_vector(self):
        np.testing.assert_allclose(T.weight_norm(t([[3.0, 4.0]]), t([1.0])).data, [[0.6, 0.8]])

    def test_scaled(self):
        np.testing.assert_allclose(T.weight_norm(t([[3.0, 4.0]]), t([10.0])).data, [[6.0, 8.0]])

    def test_identity_when_magnitude_is_norm(self):
        v = np.random.default_rng(3).normal(size=(4, 2, 3))
        norms = np.linalg.norm(v.reshape(4, -1), axis=1)
        np.testing.assert_allclose(T.weight_norm(t(v), t(norms)).data, v, rtol=1e-14)

    def test_zero_direction(self):
        with pytest.raises(NumericalError):
            T.weight_norm(t([[0.0, 0.0]]), t([1.0]))


class TestCrossEntropy:
    def test_uniform(self):
        loss = T.cross_entropy(t(np.zeros((3, 10))), [0, 4, 9])
        assert loss.item() == pytest.approx(math.log(10), abs=1e-12)

    def test_saturated(self):
        assert T.cross_entropy(t([[1000.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)

    def test_three_class(self):
        assert T.cross_entropy(t([[1.0, 2.0, 3.0]]), [2]).item() == pytest.approx(0.40761, abs=1e-5)

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            T.cross_entropy(t([[1.0, 2.0]]), [2])


class TestBackward:
    def test_sum_gives_ones(self):
        x = t(np.random.default_rng(4).normal(size=(2, 3, 4)), rg=True)
        np.testing.assert_array_equal(T.grad(T.sum(x), {"x": x})["x"], np.ones((2, 3, 4)))

    def test_conv_energy_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 2, 5, 5))
        k = rng.normal(size=(3, 2, 2, 3))

        def build(ts):
            y = T.conv2d(ts[0], ts[1])
            return T.dot(y, y)

        assert check_op(build, [x, k]) < 1e-4

    def test_frozen_tensors_absent(self):
        a = t([1.0, 2.0], rg=True)
        b = t([3.0, 4.0])
        g = T.grad(T.sum(T.mul(a, b)), {"a": a, "b": b})
        assert set(g) == {"a"}

    def test_non_scalar_loss(self):
        a = t([1.0, 2.0], rg=True)
        with pytest.raises(UsageError):
            T.grad(a, {"a": a})

    def test_shared_subexpression_accumulates(self):
        a = t([2.0], rg=True)
        b = T.mul(a, a)
        g = T.grad(T.sum(T.add(b, b)), {"a": a})["a"]
        assert g[0] == 8.0


class TestSgdStep:
    def test_zero_lr(self):
        p = {"w": np.array([1.0, 2.0])}
        assert np.array_equal(T.sgd_step(p, {"w": np.array([5.0, 5.0])}, 0.0)["w"], p["w"])

    def test_arithmetic(self):
        out = T.sgd_step({"w": np.array([1.0])}, {"w": np.array([0.5])}, 0.001)
        assert out["w"][0] == pytest.approx(0.9995, abs=1e-15)

    def test_two_steps_equal_double_step(self):
        p = {"w": np.array([0.3, -1.2])}
        g = {"w": np.array([0.25, 0.5])}
        twice = T.sgd_step(T.sgd_step(p, g, 0.125), g, 0.125)
        once = T.sgd_step(p, g, 0.25)
        np.testing.assert_array_equal(twice["w"], once["w"])

    def test_missing_gradient(self):
        with pytest.raises(UsageError):
            T.sgd_step({"w": np.zeros(2), "b": np.zeros(1)}, {"w": np.zeros(2)}, 0.1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), stride=st.integers(1, 3), padding=st.integers(0, 2))
def test_adjointness_property(seed, stride, padding):
    rng = np.random.default_rng(seed)
    k = rng.normal(size=(2, 3, 3, 3))
    h, w = 3 * stride - 2 * padding + 3, 2 * stride - 2 * padding + 3
    a = rng.normal(size=(1, 3, h, w))
    y = T.conv2d(t(a), t(k), stride, padding).data
    b = rng.normal(size=y.shape)
    back = T.transposed_conv2d(t(b), t(k), stride, padding).data
    assert back.shape == a.shape
    lhs = np.sum(y * b)
    rhs = np.sum(a * back)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_determinism():
    rng = np.random.default_rng(9)
    x, k = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    a = T.conv2d(t(x), t(k), 2, 1).data
    b = T.conv2d(t(x), t(k), 2, 1).data
    assert a.tobytes() == b.tobytes()
