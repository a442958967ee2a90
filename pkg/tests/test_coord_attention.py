import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cayolo.coord_attention import (ca_backward, ca_forward, ca_param_count, directional_pool,
                                    hidden_channels, init_ca_params)
from cayolo.errors import ShapeError

from conftest import finite_difference_grads, max_relative_error, random_ca_params


def rigged_gates(channels, reduction, bias, rng):
    """Params whose gates are sigmoid(bias) everywhere."""
    p = init_ca_params(channels, reduction, rng)
    return p.with_arrays({
        "fh.weight": np.zeros_like(p.fh.weight), "fw.weight": np.zeros_like(p.fw.weight),
        "fh.bias": np.full(channels, bias), "fw.bias": np.full(channels, bias),
    })


class TestDirectionalPool:
    def test_hand_average(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        qh, qw = directional_pool(x)
        assert qh.shape == (1, 1, 2, 1) and qw.shape == (1, 1, 1, 2)
        np.testing.assert_array_equal(qh.ravel(), [1.5, 3.5])
        np.testing.assert_array_equal(qw.ravel(), [2.0, 3.0])

    def test_constant(self):
        qh, qw = directional_pool(np.full((2, 3, 4, 5), -1.25))
        np.testing.assert_array_equal(qh, -1.25)
        np.testing.assert_array_equal(qw, -1.25)

    def test_mean_preserving(self, rng):
        x = rng.standard_normal((2, 4, 6, 9))
        qh, qw = directional_pool(x)
        g = x.mean(axis=(2, 3))
        np.testing.assert_allclose(qh.mean(axis=(2, 3)), g, atol=1e-12)
        np.testing.assert_allclose(qw.mean(axis=(2, 3)), g, atol=1e-12)


class TestForward:
    def test_identity_gating(self, rng):
        x = rng.standard_normal((1, 8, 5, 6))
        p = rigged_gates(8, 4, 25.0, rng)
        y, cache = ca_forward(x, p)
        assert np.all(np.abs(cache.gh - 1) < 1e-9) and np.all(np.abs(cache.gw - 1) < 1e-9)
        np.testing.assert_allclose(y, x, atol=1e-8, rtol=0)

    def test_half_gates_quarter_output(self, rng):
        x = rng.standard_normal((2, 8, 4, 3))
        y, _ = ca_forward(x, rigged_gates(8, 2, 0.0, rng))
        np.testing.assert_allclose(y, x / 4, rtol=1e-15, atol=0)

    def test_shape(self, rng):
        x = rng.standard_normal((2, 16, 7, 5))
        y, _ = ca_forward(x, init_ca_params(16, 4, rng))
        assert y.shape == x.shape

    def test_matches_step_by_step_reference(self, rng):
        # recompute the block literally: transpose-concat, conv, BN, ReLU, split, gates
        from cayolo.tensor_core import activate, batchnorm_infer, conv2d
        x = rng.standard_normal((2, 6, 4, 5))
        p = random_ca_params(6, 2, rng)
        qh = x.mean(axis=3, keepdims=True)                        # (N,C,H,1)
        qw = x.mean(axis=2, keepdims=True).transpose(0, 1, 3, 2)  # (N,C,W,1)
        z = np.concatenate([qh, qw], axis=2)
        f = activate(batchnorm_infer(conv2d(z, p.f1), p.bn), "relu")
        fh, fw = f[:, :, :4], f[:, :, 4:].transpose(0, 1, 3, 2)
        gh = activate(conv2d(fh, p.fh), "sigmoid")
        gw = activate(conv2d(fw, p.fw), "sigmoid")
        expected = x * gh * gw
        y, _ = ca_forward(x, p)
        np.testing.assert_allclose(y, expected, rtol=1e-13, atol=1e-14)

    def test_separable_ratio(self, rng):
        x = rng.uniform(0.5, 2.0, (1, 3, 4, 5))
        y, _ = ca_forward(x, random_ca_params(3, 1, rng))
        r = y / x
        # rank-1 per channel: r[i,j] * r[0,0] == r[i,0] * r[0,j]
        np.testing.assert_allclose(r * r[:, :, :1, :1], r[:, :, :, :1] * r[:, :, :1, :], rtol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ca_forward(np.zeros((1, 4, 3, 3)), init_ca_params(8, 4, rng))


class TestBackward:
    def test_zero_adjoint(self, rng):
        x = rng.standard_normal((1, 8, 5, 7))
        _, cache = ca_forward(x, random_ca_params(8, 4, rng))
        g = ca_backward(cache, np.zeros_like(x))
        assert not np.any(g.d_input)
        assert all(not np.any(v) for v in g.d_params.values())

    def test_finite_differences(self, rng):
        x = rng.standard_normal((1, 8, 5, 7))
        p = random_ca_params(8, 4, rng)
        dy = rng.standard_normal(x.shape)
        _, cache = ca_forward(x, p)
        g = ca_backward(cache, dy)
        dx, dparams = finite_difference_grads(x, p, dy)
        assert max_relative_error(g.d_input, dx) < 1e-4
        for key, num in dparams.items():
            assert g.d_params[key].shape == num.shape
            assert max_relative_error(g.d_params[key], num) < 1e-4, key

    def test_saturated_gates_pass_gradient_through(self, rng):
        x = rng.standard_normal((1, 8, 5, 7))
        p = rigged_gates(8, 4, 40.0, rng)
        dy = rng.standard_normal(x.shape)
        _, cache = ca_forward(x, p)
        np.testing.assert_allclose(ca_backward(cache, dy).d_input, dy, atol=1e-6, rtol=0)

    def test_shape_mismatch(self, rng):
        x = rng.standard_normal((1, 8, 5, 7))
        _, cache = ca_forward(x, init_ca_params(8, 4, rng))
        with pytest.raises(ShapeError):
            ca_backward(cache, np.zeros((1, 8, 7, 5)))


class TestParamCount:
    def test_worked_examples(self):
        assert ca_param_count(64, 32) == 518
        assert ca_param_count(1, 1) == 8

    def test_matches_arrays(self, rng):
        for c, r in [(64, 16), (10, 3), (5, 8)]:
            p = init_ca_params(c, r, rng)
            assert sum(a.size for a in p.arrays().values()) == ca_param_count(c, r)

    def test_monotone_in_reduction(self):
        for c in (1, 7, 64, 1024):
            counts = [ca_param_count(c, r) for r in range(1, 70)]
            assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_hidden_floor_min_one(self):
        assert hidden_channels(8, 16) == 1
        assert hidden_channels(1024, 16) == 64


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 12), h=st.integers(1, 6), w=st.integers(1, 6),
       r=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_shape_preserved_and_gated(n, c, h, w, r, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w))
    y, cache = ca_forward(x, init_ca_params(c, r, rng))
    assert y.shape == x.shape
    assert np.all((cache.gh > 0) & (cache.gh < 1)) and np.all((cache.gw > 0) & (cache.gw < 1))
    assert np.all(np.abs(y) <= np.abs(x))
