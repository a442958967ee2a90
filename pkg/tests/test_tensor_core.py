import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cayolo.errors import GeometryError, ParameterError, ShapeError
from cayolo.tensor_core import (BNParams, ConvParams, activate, batchnorm_infer,
                                concat_channels, conv2d, maxpool, spp, upsample2x)

from conftest import conv2d_loops


class TestConv2d:
    def test_identity_1x1(self, rng):
        x = rng.standard_normal((2, 5, 6, 7))
        w = np.eye(5).reshape(5, 5, 1, 1)
        np.testing.assert_array_equal(conv2d(x, ConvParams(w)), x)

    def test_all_ones_3x3_on_constant(self):
        c = 2.5
        x = np.full((1, 1, 6, 6), c)
        out = conv2d(x, ConvParams(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 4, 4)
        np.testing.assert_array_equal(out, 9 * c)

    def test_same_padding_shape(self):
        x = np.zeros((1, 3, 416, 416))
        p = ConvParams.same(np.zeros((32, 3, 3, 3)))
        assert conv2d(x, p).shape == (1, 32, 416, 416)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5), (3, 1, 3)])
    def test_matches_loop_oracle_exactly(self, rng, stride, pad, k):
        # integer-valued data keeps every partial sum exact in float64
        x = rng.integers(-5, 6, size=(2, 4, 9, 9)).astype(np.float64)
        w = rng.integers(-3, 4, size=(3, 4, k, k)).astype(np.float64)
        b = rng.integers(-2, 3, size=3).astype(np.float64)
        got = conv2d(x, ConvParams(w, b, stride, pad))
        np.testing.assert_array_equal(got, conv2d_loops(x, w, b, stride, pad))

    def test_linearity(self, rng):
        x, y = rng.standard_normal((2, 2, 3, 8, 8))
        p = ConvParams(rng.standard_normal((4, 3, 3, 3)), None, 1, 1)
        a, b = 1.7, -0.3
        lhs = conv2d(a * x + b * y, p)
        rhs = a * conv2d(x, p) + b * conv2d(y, p)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(np.zeros((1, 2, 5, 5)), ConvParams(np.zeros((1, 3, 1, 1))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(GeometryError):
            conv2d(np.zeros((1, 1, 2, 2)), ConvParams(np.zeros((1, 1, 3, 3))))

    def test_same_rejects_even_kernel(self):
        with pytest.raises(ParameterError):
            ConvParams.same(np.zeros((1, 1, 2, 2)))

    def test_pure(self, rng):
        x = rng.standard_normal((1, 3, 7, 7))
        p = ConvParams(rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2), 2, 1)
        x_copy = x.copy()
        a, b = conv2d(x, p), conv2d(x, p)
        assert a.tobytes() == b.tobytes()
        np.testing.assert_array_equal(x, x_copy)


class TestBatchNorm:
    def test_identity(self, rng):
        x = rng.standard_normal((1, 3, 4, 4))
        p = BNParams(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=0.0)
        np.testing.assert_array_equal(batchnorm_infer(x, p), x)

    def test_scalar_substitution(self):
        # (3 - 1) / sqrt(4) * 2 + 1
        p = BNParams(np.array([2.0]), np.array([1.0]), np.array([1.0]), np.array([4.0]), eps=0.0)
        assert batchnorm_infer(np.full((1, 1, 1, 1), 3.0), p).item() == 3.0

    def test_negative_variance_rejected(self):
        with pytest.raises(ParameterError):
            BNParams(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, -0.5]))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            batchnorm_infer(np.zeros((1, 3, 2, 2)), BNParams.identity(2))


class TestActivate:
    def test_fixed_points(self):
        z = np.zeros((1, 1, 1, 1))
        assert activate(z, "mish").item() == 0.0
        assert activate(z, "sigmoid").item() == 0.5
        assert activate(np.full((1, 1, 1, 1), -2.0), "relu").item() == 0.0

    def test_mish_one_against_high_precision(self):
        mpmath.mp.dps = 40
        expected = float(mpmath.mpf(1) * mpmath.tanh(mpmath.log(1 + mpmath.e)))
        got = activate(np.ones((1, 1, 1, 1)), "mish").item()
        assert got == pytest.approx(expected, abs=1e-15)
        assert round(got, 6) == 0.865098

    def test_sigmoid_saturation(self):
        v = activate(np.full((1, 1, 1, 1), 40.0), "sigmoid").item()
        # 1 - e^-40 ~ 1 - 4e-18 rounds to 1.0 in double precision
        assert 1 - 1e-15 < v <= 1.0
        with np.errstate(over="raise"):
            big = activate(np.array([-1000.0, 1000.0]).reshape(1, 1, 1, 2), "sigmoid")
        assert np.all(np.isfinite(big))

    def test_mish_no_overflow(self):
        x = np.array([-1e4, -50, 0, 50, 1e4]).reshape(1, 1, 1, 5)
        with np.errstate(over="raise"):
            out = activate(x, "mish")
        assert np.all(np.isfinite(out))

    def test_mish_monotone_and_asymptote(self):
        t = np.linspace(0, 30, 3001).reshape(1, 1, 1, -1)
        m = activate(t, "mish").ravel()
        assert np.all(np.diff(m) > 0)
        assert abs(activate(np.full((1, 1, 1, 1), 20.0), "mish").item() - 20.0) < 1e-8

    def test_leaky_slope(self):
        x = np.array([-10.0, 0.0, 3.0]).reshape(1, 1, 1, 3)
        np.testing.assert_allclose(activate(x, "leaky").ravel(), [-1.0, 0.0, 3.0])

    def test_unknown(self):
        with pytest.raises(ParameterError):
            activate(np.zeros((1, 1, 1, 1)), "swish")


class TestPooling:
    def test_constant(self):
        x = np.full((1, 2, 5, 5), 3.0)
        np.testing.assert_array_equal(maxpool(x, 3), x)

    def test_single_peak_spreads(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = 7.0
        np.testing.assert_array_equal(maxpool(x, 3), np.full((1, 1, 3, 3), 7.0))

    def test_window_enumeration(self, rng):
        x = rng.standard_normal((1, 2, 6, 5))
        k, r = 5, 2
        out = maxpool(x, k)
        for c in range(2):
            for i in range(6):
                for j in range(5):
                    win = x[0, c, max(0, i - r):i + r + 1, max(0, j - r):j + r + 1]
                    assert out[0, c, i, j] == win.max()

    def test_same_extent_large_kernel(self):
        assert maxpool(np.zeros((1, 8, 13, 13)), 13).shape == (1, 8, 13, 13)

    def test_negative_borders_use_real_maxima(self):
        x = np.full((1, 1, 4, 4), -5.0)
        np.testing.assert_array_equal(maxpool(x, 3), x)

    def test_even_kernel(self):
        with pytest.raises(ParameterError):
            maxpool(np.zeros((1, 1, 4, 4)), 4)


class TestSpp:
    def test_channels(self):
        assert spp(np.zeros((1, 512, 13, 13))).shape == (1, 2048, 13, 13)

    def test_constant(self):
        np.testing.assert_array_equal(spp(np.full((1, 2, 4, 4), 1.5)), 1.5)

    def test_identity_block_and_domination(self, rng):
        x = rng.standard_normal((2, 3, 9, 9))
        out = spp(x)
        assert out[:, :3].tobytes() == x.tobytes()
        for b in range(1, 4):
            assert np.all(out[:, 3 * b:3 * (b + 1)] >= x)


class TestUpsampleConcat:
    def test_index_map(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = upsample2x(x)[0, 0]
        for i in range(4):
            for j in range(4):
                assert out[i, j] == x[0, 0, i // 2, j // 2]

    def test_shape(self):
        assert upsample2x(np.zeros((1, 256, 13, 13))).shape == (1, 256, 26, 26)

    def test_constant(self):
        np.testing.assert_array_equal(upsample2x(np.full((1, 1, 3, 2), 4.0)), 4.0)

    def test_concat_single(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        np.testing.assert_array_equal(concat_channels([x]), x)

    def test_concat_order(self, rng):
        a, b = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 4, 4))
        out = concat_channels([a, b])
        assert out.shape == (1, 5, 4, 4)
        np.testing.assert_array_equal(out[:, :2], a)
        np.testing.assert_array_equal(out[:, 2:], b)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels([np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 5, 4))])


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(1, 7), w=st.integers(1, 7),
       k=st.sampled_from([1, 3]), stride=st.integers(1, 2), seed=st.integers(0, 10_000))
def test_conv_property_vs_loops(n, c, h, w, k, stride, seed):
    rng = np.random.default_rng(seed)
    pad = (k - 1) // 2
    x = rng.integers(-4, 5, size=(n, c, h, w)).astype(float)
    wt = rng.integers(-3, 4, size=(2, c, k, k)).astype(float)
    got = conv2d(x, ConvParams(wt, None, stride, pad))
    np.testing.assert_array_equal(got, conv2d_loops(x, wt, None, stride, pad))
    assert np.all(np.isfinite(got))
