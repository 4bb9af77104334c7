"""Differentiable building blocks shared by the whole model.

All functions operate on torch tensors and are pure; gradients come from
torch autograd and are verified against central finite differences with
:func:`grad_check`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor, nn

LN_EPS = 1e-5
ROPE_BASE = 10000.0


class ConfigError(ValueError):
    """Raised for invalid shapes or hyperparameters."""


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the trailing axis; weight is ``[d_in, d_out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ConfigError(
            f"linear: input width {x.shape[-1]} does not match weight {tuple(weight.shape)}"
        )
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


class Linear(nn.Module):
    """Affine map storing its weight as ``[d_in, d_out]``."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, init: str = "normal"):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.weight = nn.Parameter(torch.empty(d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        if init == "zeros":
            nn.init.zeros_(self.weight)
        else:
            nn.init.normal_(self.weight, std=1.0 / math.sqrt(d_in))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def extra_repr(self) -> str:
        return f"{self.d_in} -> {self.d_out}, bias={self.bias is not None}"


def layer_norm(x: Tensor, eps: float = LN_EPS) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``mask`` is a boolean ``[L_q, L_k]`` matrix where True marks an allowed
    key. Rows with no allowed key produce a zero vector.
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ConfigError("softmax_attention: q and k head dims differ")
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(d)
    if mask is None:
        return torch.softmax(logits, dim=-1) @ v
    if mask.shape != logits.shape[-2:]:
        raise ConfigError(f"mask shape {tuple(mask.shape)} != {tuple(logits.shape[-2:])}")
    logits = logits.masked_fill(~mask, float("-inf"))
    # shift is constant per row so it never needs a gradient
    shift = logits.detach().amax(dim=-1, keepdim=True)
    shift = torch.where(torch.isfinite(shift), shift, torch.zeros_like(shift))
    weights = torch.exp(logits - shift)
    denom = weights.sum(dim=-1, keepdim=True)
    weights = weights / torch.where(denom > 0, denom, torch.ones_like(denom))
    return weights @ v


def causal_mask(n: int, device=None) -> Tensor:
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()


@dataclass(frozen=True)
class RoPEParams:
    head_dim: int
    base: float = ROPE_BASE
    axis: str = "temporal"  # "row", "col" or "temporal"

    def __post_init__(self):
        if self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head dim, got {self.head_dim}")

    def frequencies(self, dtype=torch.float64, device=None) -> Tensor:
        i = torch.arange(self.head_dim // 2, dtype=dtype, device=device)
        return self.base ** (-2.0 * i / self.head_dim)


def apply_rope(tokens: Tensor, positions: Tensor, params: RoPEParams) -> Tensor:
    """Rotate consecutive feature pairs of ``tokens`` by ``position * theta_i``.

    ``tokens`` is ``[..., n, head_dim]`` and ``positions`` has length ``n``.
    """
    if tokens.shape[-1] != params.head_dim:
        raise ConfigError(f"RoPE head dim {params.head_dim} != token dim {tokens.shape[-1]}")
    theta = params.frequencies(dtype=tokens.dtype, device=tokens.device)
    pos = torch.as_tensor(positions, dtype=tokens.dtype, device=tokens.device)
    angle = pos[:, None] * theta[None, :]
    cos, sin = torch.cos(angle), torch.sin(angle)
    x0 = tokens[..., 0::2]
    x1 = tokens[..., 1::2]
    out = torch.stack((x0 * cos - x1 * sin, x0 * sin + x1 * cos), dim=-1)
    return out.flatten(-2)


def apply_rope_2d(tokens: Tensor, rows: Tensor, cols: Tensor, base: float = ROPE_BASE) -> Tensor:
    """Spatial RoPE: first half of the head dim rotates by row, second half by column."""
    d = tokens.shape[-1]
    if d % 4:
        raise ConfigError(f"2D RoPE needs head dim divisible by 4, got {d}")
    half = d // 2
    r = apply_rope(tokens[..., :half], rows, RoPEParams(half, base, "row"))
    c = apply_rope(tokens[..., half:], cols, RoPEParams(half, base, "col"))
    return torch.cat((r, c), dim=-1)


def adaln_modulate(tokens: Tensor, condition: Tensor, head: Callable[[Tensor], Tensor]):
    """Layer-normalize ``tokens`` and apply ``gamma * x + beta`` from ``head(condition)``.

    ``head`` maps the condition to ``3 * d`` features split as (gamma, beta,
    alpha); ``condition`` must broadcast against ``tokens`` after the head.
    Returns the modulated tokens and the residual gate alpha.
    """
    d = tokens.shape[-1]
    mod = head(condition)
    if mod.shape[-1] != 3 * d:
        raise ConfigError(f"adaLN head width {mod.shape[-1]} != 3 * {d}")
    gamma, beta, alpha = mod.split(d, dim=-1)
    return gamma * layer_norm(tokens) + beta, alpha


@dataclass(frozen=True)
class AttentionLayout:
    """Regrouping of a ``[B, L, P, d]`` token grid for axis attention.

    Spatial groups are frames: ``[B*L, P, d]``. Temporal groups are
    windows of ``window`` consecutive frames per token: ``[B*(L/l)*P, l, d]``.
    """

    batch: int
    frames: int
    tokens: int
    window: int

    def __post_init__(self):
        if self.window < 1 or self.frames % self.window:
            raise ConfigError(f"window {self.window} does not tile {self.frames} frames")

    @property
    def n_windows(self) -> int:
        return self.frames // self.window

    def spatial(self, x: Tensor) -> Tensor:
        return x.reshape(self.batch * self.frames, self.tokens, x.shape[-1])

    def spatial_inverse(self, x: Tensor) -> Tensor:
        return x.reshape(self.batch, self.frames, self.tokens, x.shape[-1])

    def temporal(self, x: Tensor) -> Tensor:
        d = x.shape[-1]
        x = x.reshape(self.batch, self.n_windows, self.window, self.tokens, d)
        return x.permute(0, 1, 3, 2, 4).reshape(-1, self.window, d)

    def temporal_inverse(self, x: Tensor) -> Tensor:
        d = x.shape[-1]
        x = x.reshape(self.batch, self.n_windows, self.tokens, self.window, d)
        return x.permute(0, 1, 3, 2, 4).reshape(self.batch, self.frames, self.tokens, d)


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[..., None] * freqs.to(t.device)
    emb = torch.cat((torch.cos(args), torch.sin(args)), dim=-1)
    if dim % 2:
        emb = torch.cat((emb, torch.zeros_like(emb[..., :1])), dim=-1)
    return emb


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    n_samples: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    Vector-valued ``f`` is reduced to a scalar with a fixed random cotangent.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = 1e-4 * max(1, max|a|)`` so coordinates with vanishing gradient
    are judged on an absolute scale. ``n_samples`` checks a random subset of
    coordinates per input instead of all of them.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    single = isinstance(inputs, Tensor)
    xs = [inputs] if single else list(inputs)
    xs = [x.detach().clone().to(torch.float64).requires_grad_(True) for x in xs]
    gen = torch.Generator().manual_seed(seed)

    out = f(*xs)
    if not torch.isfinite(out).all():
        raise FloatingPointError("grad_check: function output is not finite")
    cot = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar(*args):
        return (f(*args) * cot).sum()

    grads = torch.autograd.grad(scalar(*xs), xs, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(xs, grads)]
    scale = max([1.0] + [float(a.abs().max()) for a in analytic if a.numel()])
    floor = 1e-4 * scale

    worst = 0.0
    with torch.no_grad():
        for i, x in enumerate(xs):
            flat = x.view(-1)
            idx = torch.arange(flat.numel())
            if n_samples is not None and n_samples < flat.numel():
                idx = torch.randperm(flat.numel(), generator=gen)[:n_samples]
            a_flat = analytic[i].reshape(-1)
            for j in idx.tolist():
                orig = flat[j].item()
                flat[j] = orig + eps
                fp = scalar(*xs).item()
                flat[j] = orig - eps
                fm = scalar(*xs).item()
                flat[j] = orig
                num = (fp - fm) / (2 * eps)
                if not math.isfinite(num):
                    raise FloatingPointError(f"grad_check: non-finite difference at input {i}[{j}]")
                a = a_flat[j].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    return worst
