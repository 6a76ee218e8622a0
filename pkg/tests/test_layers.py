import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drk import gradcheck as G
from drk import layers as L
from drk.tensor import Rng


def _conv_loop(x, w, b, stride, pad):
    """Direct nested-loop convolution oracle."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for j in range(o):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride:r * stride + k, s * stride:s * stride + k]
                    out[i, j, r, s] = np.sum(patch * w[j]) + b[j]
    return out


def test_conv_all_ones():
    p = L.Conv2dParams(np.ones((1, 1, 3, 3)), np.zeros(1), 1, 0)
    assert L.conv2d_fwd(np.ones((1, 1, 3, 3)), p).ravel().tolist() == [9.0]


def test_conv_delta_kernel_is_identity(rng):
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    x = rng.gen.standard_normal((2, 1, 5, 6))
    assert np.array_equal(L.conv2d_fwd(x, L.Conv2dParams(w, np.zeros(1), 1, 1)), x)


@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]),
       st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**31))
def test_conv_matches_loop(n, c_in, c_out, k, stride, pad, seed):
    g = Rng(seed).gen
    x = g.standard_normal((n, c_in, 5, 6))
    p = L.Conv2dParams(g.standard_normal((c_out, c_in, k, k)), g.standard_normal(c_out), stride, pad)
    np.testing.assert_allclose(L.conv2d_fwd(x, p), _conv_loop(x, p.weight, p.bias, stride, pad), atol=1e-12)


def test_conv_bwd_zero_upstream(rng):
    x = rng.gen.standard_normal((1, 2, 5, 5))
    p = L.init_conv(rng, 2, 3, 3)
    gx, gp = L.conv2d_bwd(x, p, np.zeros((1, 3, 5, 5)))
    assert not gx.any() and not gp.weight.any() and not gp.bias.any()


def test_conv_bwd_delta_routes_pixel():
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    g = np.zeros((1, 1, 4, 4))
    g[0, 0, 2, 1] = 1
    gx, _ = L.conv2d_bwd(np.zeros((1, 1, 4, 4)), L.Conv2dParams(w, np.zeros(1), 1, 1), g)
    assert np.array_equal(gx, g)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1)])
def test_conv_cached_columns_give_same_grads(rng, stride, pad, k):
    x = rng.gen.standard_normal((2, 3, 7, 6)).astype(np.float32)
    p = L.init_conv(rng, 3, 4, k, stride=stride, padding=pad, dtype=np.float32)
    cache = {}
    y = L.conv2d_fwd(x, p, cache)
    g = rng.gen.standard_normal(y.shape).astype(np.float32)
    gx_a, gp_a = L.conv2d_bwd(x, p, g, cache)
    gx_b, gp_b = L.conv2d_bwd(x, p, g)
    assert np.array_equal(gx_a, gx_b) and np.array_equal(gp_a.weight, gp_b.weight)


def test_flush_subnormals():
    tiny = np.finfo(np.float32).tiny
    a = np.array([tiny, tiny / 4, -tiny / 2, 0.0, 1.0, -3e-30], dtype=np.float32)
    out = L.flush_subnormals(a)
    assert out.tolist() == np.array([tiny, 0, 0, 0, 1, -3e-30], dtype=np.float32).tolist()
    assert a[1] != 0  # input untouched


def test_conv_bwd_matches_finite_differences():
    assert G.run_suite("conv2d", seed=11).passed


def test_linear_and_gap(rng):
    p = L.init_linear(rng, 4, 3)
    x = rng.gen.standard_normal((2, 4))
    np.testing.assert_allclose(L.linear_fwd(x, p), x @ p.weight.T + p.bias)
    feats = np.arange(8.0).reshape(1, 2, 2, 2)
    assert L.gap_fwd(feats).tolist() == [[1.5, 5.5]]
    assert np.allclose(L.gap_bwd(feats.shape, np.ones((1, 2))), 0.25)


def test_bilinear_sample_examples():
    img = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
    assert L.bilinear_sample(img, 1, 1, 0, 0) == 3.0
    assert L.bilinear_sample(img, 0.5, 0.5, 0, 0) == 1.5
    assert L.bilinear_sample(img, -5, -5, 0, 0) == 0.0


@given(st.floats(-2, 4), st.floats(-2, 4))
def test_bilinear_matches_tent_formula(py, px):
    img = Rng(0).gen.standard_normal((1, 1, 3, 3))
    tent = sum(
        max(0.0, 1 - abs(py - i)) * max(0.0, 1 - abs(px - j)) * img[0, 0, i, j]
        for i in range(3) for j in range(3)
    )
    assert math.isclose(L.bilinear_sample(img, px, py, 0, 0), tent, abs_tol=1e-12)


def test_upsample_identity_and_constant(rng):
    x = rng.gen.standard_normal((1, 2, 3, 3))
    assert np.array_equal(L.upsample_bilinear(x, 1), x)
    np.testing.assert_allclose(L.upsample_bilinear(np.full((1, 1, 3, 4), 2.5), 2), 2.5)


def test_upsample_2x2_direct_formula():
    x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
    out = L.upsample_bilinear(x, 2)[0, 0]
    assert [out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]] == [0.0, 1.0, 2.0, 3.0]
    for i in range(4):
        for j in range(4):
            sy = min(max((i + 0.5) / 2 - 0.5, 0.0), 1.0)
            sx = min(max((j + 0.5) / 2 - 0.5, 0.0), 1.0)
            assert math.isclose(out[i, j], L.bilinear_sample(x, sx, sy, 0, 0), abs_tol=1e-15)


def test_upsample_bwd_is_adjoint(rng):
    x = rng.gen.standard_normal((1, 2, 3, 5))
    g = rng.gen.standard_normal((1, 2, 6, 10))
    lhs = np.sum(L.upsample_bilinear(x, 2) * g)
    rhs = np.sum(x * L.upsample_bilinear_bwd(x.shape, 2, g))
    assert math.isclose(lhs, rhs, rel_tol=1e-12)


def test_activations():
    assert L.activation("relu", np.array([-3.0]))[0] == 0.0
    assert L.sigmoid(np.array([0.0]))[0] == 0.5
    with np.errstate(over="raise"):
        s = L.sigmoid(np.array([40.0, -40.0]))
    assert abs(s[0] - 1) <= 1e-15 and abs(s[1]) <= 1e-15


def test_activation_bwd(rng):
    x = rng.gen.standard_normal(20)
    s = L.sigmoid(x)
    np.testing.assert_allclose(L.activation_bwd("sigmoid", x, np.ones(20)), s * (1 - s))
    np.testing.assert_array_equal(L.activation_bwd("relu", x, np.ones(20)), (x > 0).astype(float))


def test_kaiming():
    w = L.kaiming_init(Rng(0), [100_000], fan_in=2)
    assert abs(w.std() - 1.0) < 0.01
    w = L.kaiming_init(Rng(0), [4096], fan_in=8)
    assert abs(w.var() - 0.25) <= 0.025
    with pytest.raises(ValueError):
        L.kaiming_init(Rng(0), [4], fan_in=0)
