import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rad.diffusion import (
    build_schedule,
    ddim_step,
    ddim_timesteps,
    ddpm_step,
    forward_diffuse,
    masked_mse,
    predict_x0,
    sample_timesteps,
)
from rad.nn import ConfigError


def randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_schedule_tables():
    s = build_schedule(50)
    assert s.T == 50
    assert s.betas[0] == 0 and s.alpha_bars[0] == 1
    assert math.isclose(s.betas[1].item(), 0.002) and math.isclose(s.betas[50].item(), 0.4)
    ab = 1.0
    for t in range(1, 51):
        ab *= 1 - s.betas[t].item()
        assert math.isclose(s.alpha_bars[t].item(), ab, rel_tol=1e-12)
    assert (s.alpha_bars[1:] < s.alpha_bars[:-1]).all()
    assert s.sigmas[1] == 0
    with pytest.raises(ConfigError):
        build_schedule(1)
    with pytest.raises(ConfigError):
        build_schedule(10, kind="cosine")


def test_forward_diffuse_per_frame_levels():
    s = build_schedule(20)
    z0, eps = randn(2, 3, 4, 4, 1), randn(2, 3, 4, 4, 1, seed=1)
    t = torch.tensor([[0, 5, 20], [3, 0, 1]])
    zt = forward_diffuse(z0, t, eps, s)
    assert torch.equal(zt[0, 0], z0[0, 0]) and torch.equal(zt[1, 1], z0[1, 1])
    ab = s.alpha_bars[5]
    assert torch.allclose(zt[0, 1], ab.sqrt() * z0[0, 1] + (1 - ab).sqrt() * eps[0, 1])
    with pytest.raises(ValueError):
        forward_diffuse(z0, t + 1, eps, s)


def test_sample_timesteps_range():
    t = sample_timesteps((200, 10), 7, torch.Generator().manual_seed(0))
    assert t.min() == 1 and t.max() == 7


def test_masked_mse_skips_clean_frames():
    eps = torch.zeros(1, 3, 2)
    eps_hat = torch.tensor([[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]])
    t = torch.tensor([[0, 4, 0]])
    assert masked_mse(eps_hat, eps, t).item() == 4.0
    assert masked_mse(eps_hat, eps, torch.zeros(1, 3, dtype=torch.long)).item() == 0.0


def test_ddim_timesteps():
    assert ddim_timesteps(1000, 50)[:3] == [1000, 980, 960]
    seq = ddim_timesteps(50, 20)
    assert seq[0] == 50 and seq[-1] == 0 and len(seq) == 21
    assert all(a > b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(0, 10_000))
def test_ddim_with_true_noise_recovers_clean_frame(t, seed):
    s = build_schedule(50)
    z0, eps = randn(3, 4, seed=seed).clamp(-1, 1), randn(3, 4, seed=seed + 1)
    zt = forward_diffuse(z0, torch.full((3,), t), eps, s)
    assert torch.allclose(predict_x0(zt, t, eps, s), z0, atol=1e-6)
    assert torch.allclose(ddim_step(zt, t, 0, eps, s), z0, atol=1e-6)
    # intermediate jumps land on the forward marginal with the same noise
    if t > 1:
        mid = ddim_step(zt, t, t // 2, eps, s, clip=1.0)
        ref = forward_diffuse(z0, torch.full((3,), t // 2), eps, s)
        assert torch.allclose(mid, ref, atol=1e-6)


def test_ddim_rejects_upward_jump():
    s = build_schedule(10)
    z = randn(2)
    assert torch.equal(ddim_step(z, 3, 3, z, s), z)
    with pytest.raises(ValueError):
        ddim_step(z, 3, 5, z, s)


def test_ddpm_step_formula():
    s = build_schedule(10)
    z, e, n = randn(5), randn(5, seed=1), randn(5, seed=2)
    t = 6
    b, a, ab = s.betas[t], s.alphas[t], s.alpha_bars[t]
    mean = (z - b / (1 - ab).sqrt() * e) / a.sqrt()
    assert torch.allclose(ddpm_step(z, t, e, s), mean)
    assert torch.allclose(ddpm_step(z, t, e, s, n), mean + s.sigmas[t] * n)
    # last step is deterministic
    assert torch.equal(ddpm_step(z, 1, e, s, n), ddpm_step(z, 1, e, s))
    with pytest.raises(ValueError):
        ddpm_step(z, 0, e, s)
