import numpy as np
import pytest
import torch

from partdiff.denoiser import (
    Batch,
    DenoiserConfig,
    NonFiniteError,
    init_params,
    load_arrays,
    loss_and_grad,
    mu_from_eps,
    params_to_arrays,
    predict_noise,
)
from partdiff.forward_process import diffuse, forward_posterior
from partdiff.schedule import build_linear_schedule

TINY = DenoiserConfig(image_channels=1, base_channels=16, channel_multipliers=(1,), residual_blocks_per_stage=1)
CONFIGS = [
    TINY,
    DenoiserConfig(image_channels=3, base_channels=16, channel_multipliers=(1, 2), residual_blocks_per_stage=1),
    DenoiserConfig(image_channels=1, base_channels=32, channel_multipliers=(1, 2, 2), residual_blocks_per_stage=2),
]


def random_batch(n=2, c=1, size=8, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return Batch(
        x_t=torch.randn(n, c, size, size, generator=g, dtype=dtype),
        lr_cond=torch.rand(n, c, size, size, generator=g, dtype=dtype),
        noise_scale=torch.rand(n, generator=g, dtype=dtype) * 0.9 + 0.05,
        eps=torch.randn(n, c, size, size, generator=g, dtype=dtype),
    )


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(base_channels=24, group_channels=16),
        dict(channel_multipliers=()),
        dict(channel_multipliers=(1, 0)),
        dict(base_channels=16, channel_multipliers=(1, 1.5)),
        dict(residual_blocks_per_stage=0),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises((ValueError, TypeError)):
        DenoiserConfig(**kwargs)


def test_init_deterministic():
    a = params_to_arrays(init_params(CONFIGS[1], seed=3))
    b = params_to_arrays(init_params(CONFIGS[1], seed=3))
    c = params_to_arrays(init_params(CONFIGS[1], seed=4))
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_init_does_not_touch_global_rng():
    torch.manual_seed(0)
    before = torch.rand(1)
    torch.manual_seed(0)
    init_params(TINY, seed=9)
    assert torch.equal(torch.rand(1), before)


def test_group_counts():
    model = init_params(DenoiserConfig(base_channels=32, group_channels=16), seed=0)
    norms = [m for m in model.modules() if isinstance(m, torch.nn.GroupNorm)]
    assert norms
    for m in norms:
        assert m.num_groups == m.num_channels // 16


def test_fresh_output_statistics():
    model = init_params(CONFIGS[1], seed=0)
    rng = np.random.default_rng(0)
    out = predict_noise(model, rng.standard_normal((4, 3, 16, 16)), rng.random((4, 3, 16, 16)), 0.5)
    assert np.all(np.isfinite(out))
    assert abs(out.mean()) < 0.5


@pytest.mark.parametrize("config", CONFIGS)
def test_output_shape(config):
    model = init_params(config, seed=1)
    size = 4 * config.downsample_factor
    x = np.random.default_rng(0).standard_normal((config.image_channels, size, size))
    out = predict_noise(model, x, x, 0.3)
    assert out.shape == x.shape
    assert np.array_equal(out, predict_noise(model, x, x, 0.3))


def test_predict_noise_rejects_bad_inputs():
    model = init_params(TINY, seed=0)
    x = np.zeros((1, 8, 8))
    with pytest.raises(ValueError):
        predict_noise(model, x, np.zeros((1, 8, 4)), 0.5)
    bad = x.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        predict_noise(model, bad, x, 0.5)
    with pytest.raises(ValueError):
        predict_noise(model, x, x, 0.0)


def test_noise_scale_sensitivity_after_training_step():
    model = init_params(TINY, seed=0)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3, weight_decay=0.0)
    loss_and_grad(model, random_batch())
    opt.step()
    x = np.random.default_rng(1).standard_normal((1, 8, 8))
    a = predict_noise(model, x, x, 0.5)
    b = predict_noise(model, x, x, 0.6)
    assert np.max(np.abs(a - b)) > 0


def test_mu_from_eps_examples():
    sched = build_linear_schedule(5e-5, 0.01, 2000)
    rng = np.random.default_rng(0)
    x0 = rng.random((1, 6, 6))
    eps = rng.standard_normal(x0.shape)
    t = 777
    xt = diffuse(x0, sched.sqrt_alpha_bar(t), eps)
    np.testing.assert_allclose(mu_from_eps(xt, eps, sched, t), forward_posterior(xt, x0, sched, t).mean, rtol=1e-6)
    np.testing.assert_allclose(mu_from_eps(xt, np.zeros_like(xt), sched, t), xt / np.sqrt(sched.alpha(t)))
    tiny = build_linear_schedule(1e-12, 1e-12, 10)
    np.testing.assert_allclose(mu_from_eps(xt, eps, tiny, 5), xt, atol=1e-6)
    with pytest.raises(IndexError):
        mu_from_eps(xt, eps, sched, 2001)


def test_loss_zero_when_target_is_prediction():
    model = init_params(TINY, seed=0)
    b = random_batch()
    with torch.no_grad():
        b.eps = model(b.x_t, b.lr_cond, b.noise_scale)
    loss, grads = loss_and_grad(model, b)
    assert loss == 0.0
    assert all(torch.count_nonzero(g) == 0 for g in grads.values())


def test_duplicated_batch_same_loss_and_grads():
    model = init_params(TINY, seed=0)
    b = random_batch()
    dup = Batch(*(torch.cat([v, v]) for v in (b.x_t, b.lr_cond, b.noise_scale, b.eps)))
    l1, g1 = loss_and_grad(model, b)
    l2, g2 = loss_and_grad(model, dup)
    assert l2 == pytest.approx(l1, rel=1e-6)
    for k in g1:
        torch.testing.assert_close(g2[k], g1[k], rtol=1e-4, atol=1e-7)


def test_l1_norm_switch():
    model = init_params(TINY, seed=0)
    b = random_batch()
    with torch.no_grad():
        pred = model(b.x_t, b.lr_cond, b.noise_scale)
    loss, _ = loss_and_grad(model, b, norm="l1", backward=False)
    assert loss == pytest.approx(float((pred - b.eps).abs().mean()), rel=1e-6)
    with pytest.raises(ValueError):
        loss_and_grad(model, b, norm="huber")


def finite_difference_check(model, batch, n_weights=20, h=1e-3, seed=0):
    """Central differences on randomly chosen scalar weights; returns relative errors."""
    _, grads = loss_and_grad(model, batch)
    params = dict(model.named_parameters())
    names = sorted(params)
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_weights):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        orig = p.data[idx].item()
        with torch.no_grad():
            p.data[idx] = orig + h
            up, _ = loss_and_grad(model, batch, backward=False)
            p.data[idx] = orig - h
            down, _ = loss_and_grad(model, batch, backward=False)
            p.data[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = grads[name][idx].item()
        errors.append(abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
    return errors


def test_gradient_matches_finite_differences():
    model = init_params(TINY, seed=0).double()
    batch = random_batch(dtype=torch.float64)
    errors = finite_difference_check(model, batch)
    assert max(errors) <= 1e-3, errors


def test_nonfinite_forward_names_layer():
    model = init_params(TINY, seed=0)
    with torch.no_grad():
        model.conv_in.weight[0, 0, 0, 0] = float("inf")
    with pytest.raises(NonFiniteError, match="conv_in"):
        loss_and_grad(model, random_batch())


def test_param_arrays_round_trip():
    model = init_params(TINY, seed=0)
    arrays = params_to_arrays(model)
    other = init_params(TINY, seed=1)
    load_arrays(other, arrays)
    assert all(np.array_equal(arrays[k], v) for k, v in params_to_arrays(other).items())
    arrays.pop(next(iter(arrays)))
    with pytest.raises(ValueError):
        load_arrays(other, arrays)


def test_deterministic_across_thread_counts():
    model = init_params(CONFIGS[1], seed=0)
    x = np.random.default_rng(0).standard_normal((2, 3, 16, 16)).astype(np.float32)
    before = torch.get_num_threads()
    try:
        torch.set_num_threads(1)
        a = predict_noise(model, x, x, 0.4)
        torch.set_num_threads(4)
        b = predict_noise(model, x, x, 0.4)
    finally:
        torch.set_num_threads(before)
    assert np.array_equal(a, b)
