import itertools

import numpy as np
import pytest

from pix2seg.autodiff import (
    Rng,
    ShapeError,
    Tensor,
    conv2d,
    conv_output_extent,
    conv_transpose2d,
    conv_transpose_output_extent,
)


def direct_conv2d(x, k, b, stride, pad):
    """Nested-loop cross-correlation, straight from the summation definition."""
    n, c, h, w = x.shape
    oc, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, ho, wo))
    for bi, o, i, j in itertools.product(range(n), range(oc), range(ho), range(wo)):
        acc = b[o] if b is not None else 0.0
        for ci, di, dj in itertools.product(range(c), range(kh), range(kw)):
            acc += xp[bi, ci, i * stride + di, j * stride + dj] * k[o, ci, di, dj]
        out[bi, o, i, j] = acc
    return out


def direct_conv_transpose2d(x, k, stride, pad):
    """Scatter each input pixel times the kernel, then crop the padding."""
    n, c, h, w = x.shape
    _, oc, kh, kw = k.shape
    full = np.zeros((n, oc, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for bi, ci, i, j in itertools.product(range(n), range(c), range(h), range(w)):
        full[bi, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += x[bi, ci, i, j] * k[ci]
    return full[:, :, pad:full.shape[2] - pad, pad:full.shape[3] - pad]


def test_identity_kernel(rng):
    x = Tensor.gaussian((2, 1, 5, 5), 0, 1, rng)
    out = conv2d(x, Tensor.full((1, 1, 1, 1), 1.0), Tensor.zeros((1,)), 1, 0)
    assert np.array_equal(out.data, x.data)


def test_zero_kernel_gives_bias(rng):
    x = Tensor.gaussian((1, 2, 4, 4), 0, 1, rng)
    out = conv2d(x, Tensor.zeros((3, 2, 3, 3)), Tensor.from_values((3,), [0.5, -1, 2]), 1, 1)
    assert out.dims == (1, 3, 4, 4)
    for o, v in enumerate([0.5, -1, 2]):
        assert np.all(out.data[0, o] == np.float32(v))


def test_conv2d_matches_direct_oracle():
    r = Rng(99)
    x = Tensor.gaussian((1, 1, 4, 4), 0, 1, r)
    k = Tensor.gaussian((1, 1, 3, 3), 0, 1, r)
    expected = direct_conv2d(x.data.astype(np.float64), k.data.astype(np.float64), None, 1, 1)
    assert np.max(np.abs(conv2d(x, k, None, 1, 1).data - expected)) < 1e-6


@pytest.mark.parametrize("k,s,p", [(3, 2, 1), (4, 2, 1), (1, 1, 0), (4, 1, 1)])
def test_conv2d_matches_direct_oracle_multichannel(k, s, p):
    r = Rng(k * 100 + s * 10 + p)
    x = Tensor.gaussian((2, 3, 7, 6), 0, 1, r, dtype=np.float64)
    kern = Tensor.gaussian((2, 3, k, k), 0, 1, r, dtype=np.float64)
    b = Tensor.gaussian((2,), 0, 1, r, dtype=np.float64)
    expected = direct_conv2d(x.data, kern.data, b.data, s, p)
    assert np.allclose(conv2d(x, kern, b, s, p).data, expected, atol=1e-12)


@pytest.mark.parametrize("k,s,p", [(4, 2, 1), (3, 1, 1), (1, 2, 0)])
def test_conv_transpose2d_matches_scatter_oracle(k, s, p):
    r = Rng(7 + k)
    x = Tensor.gaussian((2, 2, 4, 5), 0, 1, r, dtype=np.float64)
    kern = Tensor.gaussian((2, 3, k, k), 0, 1, r, dtype=np.float64)
    expected = direct_conv_transpose2d(x.data, kern.data, s, p)
    assert np.allclose(conv_transpose2d(x, kern, None, s, p).data, expected, atol=1e-12)


@pytest.mark.parametrize("k,s,p", list(itertools.product([1, 3, 4], [1, 2], [0, 1])))
def test_output_extents(k, s, p):
    for n in (5, 8, 9):
        x = Tensor.zeros((1, 1, n, n))
        if k <= n + 2 * p:
            out = conv2d(x, Tensor.zeros((1, 1, k, k)), None, s, p)
            assert out.dims[2:] == ((n + 2 * p - k) // s + 1,) * 2 == (conv_output_extent(n, k, s, p),) * 2
        expected_t = (n - 1) * s - 2 * p + k
        if expected_t >= 1:
            out_t = conv_transpose2d(x, Tensor.zeros((1, 1, k, k)), None, s, p)
            assert out_t.dims[2:] == (expected_t,) * 2 == (conv_transpose_output_extent(n, k, s, p),) * 2


def test_conv_transpose_identity_and_upsampling_extent(rng):
    x = Tensor.gaussian((1, 1, 4, 4), 0, 1, rng)
    out = conv_transpose2d(x, Tensor.full((1, 1, 1, 1), 1.0), None, 1, 0)
    assert np.array_equal(out.data, x.data)
    big = conv_transpose2d(Tensor.zeros((1, 2, 8, 8)), Tensor.zeros((2, 3, 4, 4)), None, 2, 1)
    assert big.dims == (1, 3, 16, 16)


@pytest.mark.parametrize("seed", range(5))
def test_conv_transpose_is_adjoint_of_conv(seed):
    # <conv2d(a, K), b> == <a, conv_transpose2d(b, K)> summed explicitly
    r = Rng(seed)
    k, s, p = [(4, 2, 1), (3, 1, 1), (3, 1, 0), (2, 2, 0), (1, 1, 0)][seed]
    a = Tensor.gaussian((2, 3, 4, 4), 0, 1, r)
    kern = Tensor.gaussian((2, 3, k, k), 0, 1, r)
    ho = conv_output_extent(4, k, s, p)
    b = Tensor.gaussian((2, 2, ho, ho), 0, 1, r)
    lhs = conv2d(a, kern, None, s, p).data.astype(np.float64)
    # conv_transpose2d takes kernels as (in, out, kh, kw): the same array serves both
    rhs = conv_transpose2d(b, kern, None, s, p).data.astype(np.float64)
    assert rhs.shape == a.dims
    left = sum(float(u) * float(v) for u, v in zip(lhs.reshape(-1), b.data.reshape(-1)))
    right = sum(float(u) * float(v) for u, v in zip(a.data.reshape(-1), rhs.reshape(-1)))
    assert abs(left - right) <= 1e-5 * max(1.0, abs(left))


def test_conv_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor.zeros((1, 2, 4, 4)), Tensor.zeros((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(Tensor.zeros((1, 1, 2, 2)), Tensor.zeros((1, 1, 5, 5)))
    with pytest.raises(ShapeError):
        conv_transpose2d(Tensor.zeros((1, 1, 1, 1)), Tensor.zeros((1, 1, 2, 2)), None, 1, 1)
