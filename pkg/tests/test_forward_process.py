import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from partdiff.denoiser import mu_from_eps
from partdiff.forward_process import (
    diffuse,
    forward_posterior,
    interpolate_clean,
    interpolated_posterior,
    invert_diffuse,
    lambda_weight,
)
from partdiff.schedule import build_linear_schedule

SCHED = build_linear_schedule(5e-5, 0.01, 2000)


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def test_diffuse_identity_and_zero():
    rng = np.random.default_rng(0)
    x0, eps = rng.random((1, 8, 8)), rng.standard_normal((1, 8, 8))
    assert np.array_equal(diffuse(x0, 1.0, eps), x0)
    np.testing.assert_allclose(diffuse(np.zeros_like(x0), 0.6, eps), 0.8 * eps, rtol=1e-15)


def test_diffuse_shape_mismatch():
    with pytest.raises(ValueError):
        diffuse(np.zeros((1, 4, 4)), 0.5, np.zeros((1, 4, 5)))


def test_invert_examples():
    x = np.random.default_rng(1).random((3, 4, 4))
    np.testing.assert_allclose(invert_diffuse(x, 0.5, np.zeros_like(x)), 2 * x)
    assert np.array_equal(invert_diffuse(x, 1.0, np.ones_like(x)), x)
    with pytest.raises(ZeroDivisionError):
        invert_diffuse(x, 1e-9, x)


@settings(max_examples=50, deadline=None)
@given(scale=st.floats(0.01, 1.0), seed=st.integers(0, 2**31), h=st.integers(1, 9), w=st.integers(1, 9))
def test_round_trip(scale, seed, h, w):
    rng = np.random.default_rng(seed)
    x0 = rng.random((2, h, w)) + 0.1
    eps = rng.standard_normal(x0.shape)
    back = invert_diffuse(diffuse(x0, scale, eps), scale, eps)
    assert rel_err(back, x0) <= 1e-6


def test_works_on_torch_tensors():
    x0 = torch.rand(2, 1, 4, 4)
    eps = torch.randn(2, 1, 4, 4)
    out = diffuse(x0, 0.7, eps)
    assert isinstance(out, torch.Tensor)
    torch.testing.assert_close(invert_diffuse(out, 0.7, eps), x0, rtol=1e-5, atol=1e-6)


def test_posterior_at_first_step_collapses():
    rng = np.random.default_rng(2)
    x0, xt = rng.random((1, 5, 5)), rng.standard_normal((1, 5, 5))
    m = forward_posterior(xt, x0, SCHED, 1)
    np.testing.assert_allclose(m.mean, x0, rtol=1e-12)
    assert m.variance == 0.0


def test_posterior_zero_inputs():
    z = np.zeros((1, 3, 3))
    m = forward_posterior(z, z, SCHED, 500)
    assert np.all(m.mean == 0)
    assert m.variance == SCHED.posterior_var(500)
    with pytest.raises(IndexError):
        forward_posterior(z, z, SCHED, 0)


def test_posterior_matches_eps_form_1000_instances():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        t = int(rng.integers(1, SCHED.T + 1))
        x0 = rng.random((1, 4, 4))
        eps = rng.standard_normal(x0.shape)
        xt = diffuse(x0, SCHED.sqrt_alpha_bar(t), eps)
        ref = (xt - SCHED.beta(t) / math.sqrt(1 - SCHED.sqrt_alpha_bar(t) ** 2) * eps) / math.sqrt(SCHED.alpha(t))
        got = forward_posterior(xt, x0, SCHED, t).mean
        assert rel_err(got, ref) <= 1e-6
        assert rel_err(mu_from_eps(xt, eps, SCHED, t), got) <= 1e-6


def test_lambda_weight():
    assert lambda_weight(100, 100) == 0
    assert lambda_weight(1, 100) == pytest.approx(0.99)
    assert lambda_weight(1, 1) == 0
    for bad in [(0, 10), (11, 10)]:
        with pytest.raises(IndexError):
            lambda_weight(*bad)


def test_interpolate_clean_endpoints():
    rng = np.random.default_rng(4)
    lr, hr = rng.random((1, 4, 4)), rng.random((1, 4, 4))
    assert np.array_equal(interpolate_clean(lr, hr, 1.0), hr)
    assert np.array_equal(interpolate_clean(lr, hr, 0.0), lr)
    np.testing.assert_allclose(interpolate_clean(hr, hr, 0.37), hr, rtol=1e-15)
    with pytest.raises(ValueError):
        interpolate_clean(lr, hr[:, :3], 0.5)


def _branch(rng, t):
    hr, lr = rng.random((1, 6, 6)), rng.random((1, 6, 6))
    eps = rng.standard_normal(hr.shape)
    s = SCHED.sqrt_alpha_bar(t)
    return hr, lr, diffuse(hr, s, eps), diffuse(lr, s, eps), eps


def test_interpolated_posterior_reductions():
    rng = np.random.default_rng(5)
    k = 400
    hr, lr, xt_hr, xt_lr, _ = _branch(rng, 123)
    same = interpolated_posterior(xt_hr, hr, xt_hr, hr, SCHED, 123, k)
    plain = forward_posterior(xt_hr, hr, SCHED, 123)
    np.testing.assert_allclose(same.mean, plain.mean, rtol=1e-12)
    assert same.variance == plain.variance
    hr, lr, xt_hr, xt_lr, _ = _branch(rng, k)
    at_k = interpolated_posterior(xt_hr, hr, xt_lr, lr, SCHED, k, k)
    np.testing.assert_allclose(at_k.mean, forward_posterior(xt_lr, lr, SCHED, k).mean, rtol=1e-12)


def test_interpolated_posterior_equals_posterior_of_interpolated_pair():
    rng = np.random.default_rng(6)
    k = 700
    for _ in range(50):
        t = int(rng.integers(1, k + 1))
        hr, lr, xt_hr, xt_lr, eps = _branch(rng, t)
        lam = lambda_weight(t, k)
        x0_bar = interpolate_clean(lr, hr, lam)
        xt_bar = diffuse(x0_bar, SCHED.sqrt_alpha_bar(t), eps)
        got = interpolated_posterior(xt_hr, hr, xt_lr, lr, SCHED, t, k).mean
        ref = forward_posterior(xt_bar, x0_bar, SCHED, t).mean
        assert rel_err(got, ref) <= 1e-9


def test_interpolated_posterior_linear_in_lambda():
    # averaging the λ and 1−λ blends gives the plain average of the two branch posteriors
    rng = np.random.default_rng(7)
    k, t = 10, 3
    hr, lr, xt_hr, xt_lr, _ = _branch(rng, t)
    lam = lambda_weight(t, k)
    a = interpolated_posterior(xt_hr, hr, xt_lr, lr, SCHED, t, k).mean
    # swapping branches realises weight 1−λ
    b = interpolated_posterior(xt_lr, lr, xt_hr, hr, SCHED, t, k).mean
    mid = 0.5 * (forward_posterior(xt_hr, hr, SCHED, t).mean + forward_posterior(xt_lr, lr, SCHED, t).mean)
    np.testing.assert_allclose(0.5 * (a + b), mid, rtol=1e-12)
    assert 0 < lam < 1


def test_pure_functions_bit_identical():
    rng = np.random.default_rng(8)
    hr, lr, xt_hr, xt_lr, _ = _branch(rng, 50)
    a = interpolated_posterior(xt_hr, hr, xt_lr, lr, SCHED, 50, 100).mean
    b = interpolated_posterior(xt_hr, hr, xt_lr, lr, SCHED, 50, 100).mean
    assert np.array_equal(a, b)


def test_interpolated_posterior_explicit_lambda():
    rng = np.random.default_rng(9)
    hr, lr, xt_hr, xt_lr, _ = _branch(rng, 30)
    hr_only = interpolated_posterior(xt_hr, hr, xt_lr, lr, SCHED, 30, 100, lam=1.0).mean
    np.testing.assert_allclose(hr_only, forward_posterior(xt_hr, hr, SCHED, 30).mean, rtol=1e-12)
    with pytest.raises(ValueError):
        interpolated_posterior(xt_hr, hr, xt_lr, lr, SCHED, 30, 100, lam=1.5)
