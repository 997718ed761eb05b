import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gfenet.errors import ConfigError, SizeError
from gfenet.frequency import GaussianKernelSpec, blur, gaussian_kernel, highpass, highpass_np, hfm_to_uint8


def dense_highpass(img, w):
    """Loop-based reflect-padded correlation, independent of torch."""
    r = w.shape[0] // 2
    p = np.pad(img, r, mode="reflect")
    out = np.empty_like(img, dtype=np.float64)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            out[i, j] = np.sum(p[i:i + 2 * r + 1, j:j + 2 * r + 1] * w)
    return img - out


@pytest.mark.parametrize("r,sigma", [(1, 1.0), (3, 0.7), (10, 5.0), (20, 10.0)])
def test_kernel_normalized_and_symmetric(r, sigma):
    w = gaussian_kernel(GaussianKernelSpec(r, sigma))
    assert w.shape == (2 * r + 1, 2 * r + 1)
    assert abs(w.sum() - 1.0) <= 1e-9
    np.testing.assert_array_equal(w, w[::-1, :])
    np.testing.assert_array_equal(w, w[:, ::-1])
    np.testing.assert_allclose(w, w.T, rtol=0, atol=1e-15)


def test_flat_kernel_limit():
    w = gaussian_kernel(GaussianKernelSpec(1, 1e6))
    np.testing.assert_allclose(w, 1 / 9, atol=1e-6)


def test_center_weight_r1_sigma1():
    expected = 1.0 / (1.0 + 4 * math.exp(-0.5) + 4 * math.exp(-1.0))
    w = gaussian_kernel(GaussianKernelSpec(1, 1.0))
    assert w[1, 1] == pytest.approx(expected, abs=1e-12)
    assert w[1, 1] == pytest.approx(0.2042, abs=1e-4)


@pytest.mark.parametrize("r,sigma", [(0, 1.0), (1, 0.0), (2, -1.0)])
def test_invalid_kernel_spec(r, sigma):
    with pytest.raises(ConfigError):
        GaussianKernelSpec(r, sigma)


def test_constant_image_has_zero_hfm():
    x = torch.full((1, 3, 40, 40), 0.37, dtype=torch.float64)
    assert highpass(x, GaussianKernelSpec(10, 5.0)).abs().max() < 1e-12


def test_impulse_matches_dense_oracle():
    spec = GaussianKernelSpec(1, 1.0)
    img = np.zeros((33, 33))
    img[16, 16] = 1.0
    oracle = dense_highpass(img, gaussian_kernel(spec))
    got = highpass_np(img, spec)
    np.testing.assert_allclose(got, oracle, atol=1e-12)
    assert got[16, 16] == pytest.approx(1 - 0.2042, abs=1e-4)


def test_random_image_matches_dense_oracle(rng):
    spec = GaussianKernelSpec(3, 1.7)
    img = rng.random((20, 17))
    np.testing.assert_allclose(highpass_np(img, spec), dense_highpass(img, gaussian_kernel(spec)), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_linearity(a, b, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 3, 24, 24, generator=g, dtype=torch.float64)
    y = torch.rand(1, 3, 24, 24, generator=g, dtype=torch.float64)
    spec = GaussianKernelSpec(3, 2.0)
    lhs = highpass(a * x + b * y, spec)
    rhs = a * highpass(x, spec) + b * highpass(y, spec)
    assert (lhs - rhs).abs().max() < 1e-6


def test_sum_identity_and_determinism(rng):
    spec = GaussianKernelSpec(4, 2.0)
    x = torch.from_numpy(rng.random((1, 3, 32, 32)))
    h = highpass(x, spec)
    assert float(h.sum()) == pytest.approx(float(x.sum() - blur(x, spec).sum()), abs=1e-9)
    assert torch.equal(h, highpass(x, spec))


def test_kernel_larger_than_image_raises():
    with pytest.raises(SizeError):
        highpass(torch.zeros(1, 3, 15, 15), GaussianKernelSpec(10, 5.0))


def test_finite_difference_gradient(rng):
    spec = GaussianKernelSpec(2, 1.0)
    x = torch.from_numpy(rng.random((1, 1, 8, 8))).requires_grad_(True)
    weights = torch.from_numpy(rng.standard_normal((1, 1, 8, 8)))

    def s(t):
        return (torch.tanh(highpass(t, spec)) * weights).sum()

    s(x).backward()
    analytic = x.grad.numpy().ravel()
    base = x.detach().numpy().copy()
    eps = 1e-6
    numeric = np.empty(base.size)
    for k in range(base.size):
        plus, minus = base.copy().ravel(), base.copy().ravel()
        plus[k] += eps
        minus[k] -= eps
        fp = float(s(torch.from_numpy(plus.reshape(base.shape))))
        fm = float(s(torch.from_numpy(minus.reshape(base.shape))))
        numeric[k] = (fp - fm) / (2 * eps)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-3, atol=1e-8)


def test_scaled_spec():
    base = GaussianKernelSpec(10, 5.0)
    assert base.scaled(256) == base
    assert base.scaled(512) == GaussianKernelSpec(20, 10.0)
    assert base.scaled(128) == GaussianKernelSpec(5, 2.5)


def test_hfm_dump_mapping():
    np.testing.assert_array_equal(hfm_to_uint8(np.array([-1.0, 0.0, 1.0, 2.0])), [0, 128, 255, 255])
