import math

import numpy as np
import pytest
import torch

from inpainter.diffusion import (
    NoiseSchedule,
    SamplerConfig,
    add_noise,
    ddim_step,
    denoise_loss,
    make_schedule,
    sample,
    sampling_timesteps,
)
from inpainter.errors import NumericDivergenceError, ParameterError, ShapeError

# frozen from a 50-digit mpmath cumulative product over the default ramp
ABAR_1000_ORACLE = 4.03582976538e-5


def test_zero_variance_schedule():
    s = make_schedule(T=1, beta_start=0.0, beta_end=0.0)
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[1] == 1.0


def test_default_schedule_matches_high_precision_oracle():
    s = make_schedule()
    assert s.T == 1000
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[1000] == pytest.approx(ABAR_1000_ORACLE, rel=1e-9)
    assert s.alpha_bar[1000] < 1e-3


def test_schedule_strictly_decreasing():
    s = make_schedule(T=500, beta_start=1e-4, beta_end=0.01)
    diffs = np.diff(s.alpha_bar)
    assert np.all(diffs < 0)
    assert np.all(s.alpha_bar > 0) and np.all(s.alpha_bar <= 1)


def test_schedule_invalid_ranges():
    with pytest.raises(ParameterError):
        make_schedule(T=0)
    with pytest.raises(ParameterError):
        make_schedule(T=10, beta_start=0.5, beta_end=0.1)
    with pytest.raises(ParameterError):
        make_schedule(T=10, beta_start=0.1, beta_end=1.0)
    with pytest.raises(ParameterError):
        make_schedule(T=10, beta_start=-0.1, beta_end=0.1)


@pytest.fixture(scope="module")
def schedule():
    return make_schedule()


def test_add_noise_t0_is_identity(schedule):
    g = torch.Generator().manual_seed(1)
    z0 = torch.randn(4, 16, 16, generator=g)
    eps = torch.randn(4, 16, 16, generator=g)
    assert torch.equal(add_noise(z0, eps, 0, schedule), z0)


def test_add_noise_zero_signal(schedule):
    eps = torch.randn(4, 16, 16, generator=torch.Generator().manual_seed(2))
    t = 700
    out = add_noise(torch.zeros(4, 16, 16), eps, t, schedule)
    coeff = math.sqrt(1.0 - schedule.abar(t))
    assert torch.allclose(out, coeff * eps, atol=0, rtol=0)


def test_add_noise_hand_value():
    # abar_1 = 0.25 via a one-step schedule with beta = 0.75
    s = make_schedule(T=1, beta_start=0.75, beta_end=0.75)
    out = add_noise(torch.ones(2, 3, 3), torch.ones(2, 3, 3), 1, s)
    expected = 0.5 + math.sqrt(0.75)
    assert torch.allclose(out, torch.full((2, 3, 3), expected), atol=1e-6)


def test_add_noise_shape_mismatch(schedule):
    with pytest.raises(ShapeError):
        add_noise(torch.zeros(4, 16, 16), torch.zeros(4, 8, 8), 10, schedule)


def test_ddim_step_hand_value():
    # abar_t = 0.25, abar_prev = 0.64: betas (0.36, 0.609375) give exactly that
    s = NoiseSchedule(T=2, alpha_bar=np.array([1.0, 0.64, 0.25]))
    z_t = torch.full((4, 16, 16), 0.5 + math.sqrt(0.75), dtype=torch.float64)
    out = ddim_step(z_t, torch.ones(4, 16, 16, dtype=torch.float64), 2, 1, s)
    assert torch.allclose(out, torch.full_like(out, 1.4), atol=1e-9)


def test_ddim_step_identity_when_t_prev_equals_t(schedule):
    g = torch.Generator().manual_seed(3)
    z = torch.randn(4, 16, 16, generator=g)
    eps = torch.randn(4, 16, 16, generator=g)
    assert torch.equal(ddim_step(z, eps, 500, 500, schedule), z)


def test_ddim_step_rejects_bad_order(schedule):
    z = torch.zeros(4, 16, 16)
    with pytest.raises(ParameterError):
        ddim_step(z, z, 10, 20, schedule)


def test_forward_step_consistency(schedule):
    # ddim_step(add_noise(z0,eps,t), eps, t, t_prev) == add_noise(z0,eps,t_prev)
    g = torch.Generator().manual_seed(4)
    rng = np.random.default_rng(4)
    for _ in range(50):
        z0 = torch.randn(4, 16, 16, generator=g, dtype=torch.float64)
        eps = torch.randn(4, 16, 16, generator=g, dtype=torch.float64)
        t = int(rng.integers(1, schedule.T + 1))
        t_prev = int(rng.integers(0, t + 1))
        stepped = ddim_step(add_noise(z0, eps, t, schedule), eps, t, t_prev, schedule)
        direct = add_noise(z0, eps, t_prev, schedule)
        assert torch.allclose(stepped, direct, atol=1e-5)


def test_sampling_timesteps_uniform_stride():
    ts = sampling_timesteps(1000, 50)
    assert ts[0] == 1000 and ts[-1] == 0
    assert len(ts) == 51
    strides = {ts[i] - ts[i + 1] for i in range(50)}
    assert strides == {20}


def _oracle_denoiser(z0, schedule):
    """Returns the exact eps consistent with the current z_t for a fixed z0."""

    def denoiser(z_t, t, ctx):
        abar = schedule.abar(t)
        return (z_t - math.sqrt(abar) * z0) / math.sqrt(1.0 - abar)

    return denoiser


def test_sample_recovers_z0_with_oracle_denoiser(schedule):
    g = torch.Generator().manual_seed(5)
    z0 = torch.randn(4, 16, 16, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 16, 16, generator=g, dtype=torch.float64)
    z_T = add_noise(z0, eps, schedule.T, schedule)
    cfg = SamplerConfig(steps=50, guidance_scale=1.0, seed=0)
    out = sample(_oracle_denoiser(z0, schedule), z_T, None, None, cfg, schedule)
    assert torch.allclose(out, z0, atol=1e-4)


def test_sample_cfg_collapse_at_scale_one(schedule):
    g = torch.Generator().manual_seed(6)
    z_T = torch.randn(4, 16, 16, generator=g)
    cond = torch.ones(8, 64)
    uncond = torch.zeros(8, 64)
    calls = []

    def denoiser(z, t, ctx):
        calls.append(ctx is cond)
        return 0.1 * z + ctx.mean()

    out = sample(denoiser, z_T, cond, uncond, SamplerConfig(steps=10, guidance_scale=1.0), schedule)
    assert all(calls)  # only the conditional path ran

    def cond_only(z, t, ctx):
        return 0.1 * z + cond.mean()

    ref = sample(cond_only, z_T, cond, uncond, SamplerConfig(steps=10, guidance_scale=1.0), schedule)
    assert torch.equal(out, ref)


def test_sample_cfg_collapse_at_scale_zero(schedule):
    g = torch.Generator().manual_seed(7)
    z_T = torch.randn(4, 16, 16, generator=g)
    cond = torch.ones(8, 64)
    uncond = torch.zeros(8, 64)
    calls = []

    def denoiser(z, t, ctx):
        calls.append(ctx is uncond)
        return 0.1 * z + ctx.mean()

    out = sample(denoiser, z_T, cond, uncond, SamplerConfig(steps=10, guidance_scale=0.0), schedule)
    assert all(calls)

    def uncond_only(z, t, ctx):
        return 0.1 * z + uncond.mean()

    ref = sample(uncond_only, z_T, cond, uncond, SamplerConfig(steps=10, guidance_scale=0.0), schedule)
    assert torch.equal(out, ref)


def test_sample_applies_per_step_hook(schedule):
    z_T = torch.randn(4, 16, 16, generator=torch.Generator().manual_seed(8))
    seen = []

    def hook(z, t_prev):
        seen.append(t_prev)
        return torch.zeros_like(z)

    def denoiser(z, t, ctx):
        return torch.zeros_like(z)

    out = sample(denoiser, z_T, None, None, SamplerConfig(steps=5, guidance_scale=1.0), schedule, hook)
    assert seen == [800, 600, 400, 200, 0]
    assert torch.equal(out, torch.zeros_like(out))


def test_sample_reports_divergence_step(schedule):
    z_T = torch.randn(4, 16, 16, generator=torch.Generator().manual_seed(9))

    def denoiser(z, t, ctx):
        return torch.full_like(z, float("nan"))

    with pytest.raises(NumericDivergenceError, match="step 0"):
        sample(denoiser, z_T, None, None, SamplerConfig(steps=5, guidance_scale=1.0), schedule)


def test_sampler_config_validation(schedule):
    with pytest.raises(ParameterError):
        SamplerConfig(steps=0).validate(schedule.T)
    with pytest.raises(ParameterError):
        SamplerConfig(steps=2000).validate(schedule.T)
    with pytest.raises(ParameterError):
        SamplerConfig(guidance_scale=-1.0).validate(schedule.T)


def test_denoise_loss_zero_for_perfect_prediction(schedule):
    g = torch.Generator().manual_seed(10)
    z0 = torch.randn(4, 16, 16, generator=g)
    eps = torch.randn(4, 16, 16, generator=g)

    def perfect(z_t, t, ctx):
        return eps

    assert float(denoise_loss(perfect, z0, None, 500, eps, schedule)) == 0.0


def test_denoise_loss_unit_offset(schedule):
    g = torch.Generator().manual_seed(11)
    z0 = torch.randn(4, 16, 16, generator=g)
    eps = torch.randn(4, 16, 16, generator=g)

    def off_by_one(z_t, t, ctx):
        return eps + 1.0

    assert float(denoise_loss(off_by_one, z0, None, 500, eps, schedule)) == pytest.approx(1.0, rel=1e-6)


def test_denoise_loss_nonnegative_random(schedule):
    g = torch.Generator().manual_seed(12)
    for _ in range(20):
        z0 = torch.randn(4, 16, 16, generator=g)
        eps = torch.randn(4, 16, 16, generator=g)
        noise = torch.randn(4, 16, 16, generator=g)

        def denoiser(z_t, t, ctx):
            return eps + 0.1 * noise

        val = float(denoise_loss(denoiser, z0, None, 100, eps, schedule))
        assert val >= 0.0


class TwoLayerDenoiser(torch.nn.Module):
    """Minimal trainable denoiser for gradient checks (double precision)."""

    def __init__(self, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.conv1 = torch.nn.Conv2d(4, 6, 3, padding=1).double()
        self.conv2 = torch.nn.Conv2d(6, 4, 3, padding=1).double()

    def forward(self, z_t, t, ctx):
        return self.conv2(torch.tanh(self.conv1(z_t[None])))[0]


def test_denoise_loss_gradient_matches_finite_differences(schedule):
    model = TwoLayerDenoiser(seed=13)
    g = torch.Generator().manual_seed(14)
    z0 = torch.randn(4, 16, 16, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 16, 16, generator=g, dtype=torch.float64)
    t = 400

    loss = denoise_loss(model, z0, None, t, eps, schedule)
    loss.backward()

    h = 1e-6
    for param in model.parameters():
        grad = param.grad.flatten()
        flat = param.data.flatten()
        # probe a sample of coordinates with central differences
        idx = torch.linspace(0, flat.numel() - 1, steps=min(20, flat.numel())).long()
        fd = torch.zeros(len(idx), dtype=torch.float64)
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(denoise_loss(model, z0, None, t, eps, schedule))
                flat[i] = orig - h
                down = float(denoise_loss(model, z0, None, t, eps, schedule))
                flat[i] = orig
                fd[j] = (up - down) / (2 * h)
        ad = grad[idx]
        denom = max(float(ad.norm()), float(fd.norm()), 1e-12)
        assert float((ad - fd).norm()) / denom < 1e-3
