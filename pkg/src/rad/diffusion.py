"""Noise schedules, per-frame forward diffusion, the diffusion-forcing loss and samplers.

Schedule tables are indexed by timestep with entry 0 standing for a clean
frame (``beta_0 = 0``, ``alpha_bar_0 = 1``), so ``table[t]`` works for the
whole range ``0..T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .nn import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: Tensor  # [T+1], float64
    alphas: Tensor
    alpha_bars: Tensor
    sigmas: Tensor  # ancestral-sampler std, sigma_1 = 0

    @property
    def T(self) -> int:
        return self.betas.shape[0] - 1

    def gather(self, table: Tensor, t: Tensor, like: Tensor) -> Tensor:
        """Look up ``table[t]`` and broadcast it over the trailing axes of ``like``."""
        vals = table.to(like.device)[t.long()].to(like.dtype)
        return vals.reshape(*t.shape, *([1] * (like.dim() - t.dim())))


def build_schedule(T: int, kind: str = "linear", beta_start: float | None = None,
                   beta_end: float | None = None) -> NoiseSchedule:
    """Linear beta schedule; defaults rescale (1e-4, 0.02) at T=1000 to ``T`` steps."""
    if T < 2:
        raise ConfigError("diffusion needs at least 2 timesteps")
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    scale = 1000.0 / T
    beta_start = 1e-4 * scale if beta_start is None else beta_start
    beta_end = min(0.02 * scale, 0.999) if beta_end is None else beta_end
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    if not ((betas > 0) & (betas < 1)).all():
        raise ConfigError("betas must lie in (0, 1)")
    betas = torch.cat((torch.zeros(1, dtype=torch.float64), betas))
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, 0)
    # posterior std of q(z_{t-1} | z_t, z_0)
    prev = torch.cat((torch.ones(1, dtype=torch.float64), alpha_bars[:-1]))
    var = torch.zeros_like(betas)
    var[1:] = (1 - prev[1:]) / (1 - alpha_bars[1:]) * betas[1:]
    return NoiseSchedule(betas, alphas, alpha_bars, var.sqrt())


def forward_diffuse(z0: Tensor, t: Tensor, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Noise each frame to its own level; ``t`` is ``[B, L]`` and ``t = 0`` frames pass through."""
    if (t < 0).any() or (t > schedule.T).any():
        raise ValueError(f"timesteps must lie in 0..{schedule.T}")
    ab = schedule.gather(schedule.alpha_bars, t, z0)
    # alpha_bar_0 = 1 makes clean frames an exact passthrough
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def sample_timesteps(shape, T: int, generator: torch.Generator | None = None) -> Tensor:
    """I.i.d. uniform integer noise levels in ``1..T``, one per frame."""
    return torch.randint(1, T + 1, tuple(shape), generator=generator)


def masked_mse(eps_hat: Tensor, eps: Tensor, t: Tensor) -> Tensor:
    """Mean squared error over noised frames only (``t > 0``)."""
    diff = ((eps_hat - eps) ** 2).flatten(t.dim()).mean(-1)
    mask = (t > 0).to(diff.dtype)
    return (diff * mask).sum() / mask.sum().clamp_min(1)


def df_loss(model, z0: Tensor, actions: Tensor, schedule: NoiseSchedule, t: Tensor, eps: Tensor,
            window: int | None = None, states=None, chain: bool = False) -> Tensor:
    """Diffusion-forcing loss for one forward pass with given noise draws."""
    zt = forward_diffuse(z0, t, eps, schedule)
    eps_hat, _ = model(zt, t, actions, window, states, chain=chain)
    return masked_mse(eps_hat, eps, t)


def ddpm_step(z_t: Tensor, t: int, eps_hat: Tensor, schedule: NoiseSchedule, noise: Tensor | None = None) -> Tensor:
    """Ancestral update ``z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t) + sigma_t noise``."""
    if t < 1:
        raise ValueError("ddpm_step needs t >= 1")
    beta = schedule.betas[t].item()
    alpha = schedule.alphas[t].item()
    abar = schedule.alpha_bars[t].item()
    mean = (z_t - beta / np.sqrt(1 - abar) * eps_hat) / np.sqrt(alpha)
    sigma = schedule.sigmas[t].item()
    if noise is None or sigma == 0:
        return mean
    return mean + sigma * noise


def predict_x0(z_t: Tensor, t: int, eps_hat: Tensor, schedule: NoiseSchedule) -> Tensor:
    abar = schedule.alpha_bars[t].item()
    return (z_t - np.sqrt(1 - abar) * eps_hat) / np.sqrt(abar)


def ddim_step(z_t: Tensor, t: int, t_next: int, eps_hat: Tensor, schedule: NoiseSchedule,
              clip: float | None = None) -> Tensor:
    """Deterministic (eta = 0) DDIM jump from ``t`` to ``t_next``.

    ``clip`` optionally clamps the clean-frame estimate to ``[-clip, clip]``.
    """
    if t_next == t:
        return z_t
    if not 0 <= t_next < t:
        raise ValueError("ddim_step needs t > t_next >= 0")
    x0 = predict_x0(z_t, t, eps_hat, schedule)
    if clip is not None:
        x0 = x0.clamp(-clip, clip)
        # keep the noise direction consistent with the clamped estimate
        abar = schedule.alpha_bars[t].item()
        eps_hat = (z_t - np.sqrt(abar) * x0) / np.sqrt(1 - abar)
    abar_next = schedule.alpha_bars[t_next].item()
    return np.sqrt(abar_next) * x0 + np.sqrt(1 - abar_next) * eps_hat


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniformly strided descending sub-schedule ``[T, ..., 0]`` with ``steps`` jumps."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in 1..{T}")
    seq = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(s) for s in seq]
