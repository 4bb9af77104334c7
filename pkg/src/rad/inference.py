"""Autoregressive rollout in the chunk-wise and frame-wise paradigms.

Both samplers keep the recurrent memory strictly clean: a frame only ever
reaches a recurrent block after it has been fully denoised (or was given as
context), and always through the same chained clean pass that training
uses to build the state bank.

Frame-wise: to generate frame ``j`` the model sees the window
``j-l+1 .. j`` (the last ``l-1`` clean frames at timestep 0 plus one noisy
frame), seeded with the memory state after frames ``0 .. j-l``. Once the
frame is denoised the oldest window frame is fed through the recurrent
blocks, moving the frontier forward by one.

Chunk-wise: the context warms the state in chunk-sized clean passes, then
frames are generated ``l`` at a time in non-overlapping windows, each
seeded with the carried state. After a chunk is complete its clean frames
advance the state for the next one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .diffusion import NoiseSchedule, build_schedule, ddim_step, ddim_timesteps, ddpm_step
from .memory import map_state
from .model import RadModel
from .nn import ConfigError
from .training import chunk_plan, rng

SAMPLERS = ("ddim", "ddpm")


def split_context(sequence, fraction: float = 0.6):
    """Split along axis 1 (or axis 0 for unbatched input) into context and target.

    The context is the first ``floor(fraction * L)`` frames.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError("context fraction must lie in (0, 1)")
    axis = 1 if sequence.ndim == 5 else 0
    length = sequence.shape[axis]
    if length < 5:
        raise ValueError(f"need at least 5 frames to split, got {length}")
    k = int(fraction * length + 1e-9)
    if axis:
        return sequence[:, :k], sequence[:, k:]
    return sequence[:k], sequence[k:]


@dataclass
class RolloutState:
    """Frames produced so far plus the recurrent memory frontier.

    ``frontier`` counts the frames already consumed by the recurrent blocks
    and ``states`` holds one ``[B, P, ...]`` state per layer at that point.
    """

    frames: Tensor
    states: list
    frontier: int = 0
    history: list = field(default_factory=list)  # frontier after each generated frame or chunk
    trace: list = field(default_factory=list)

    @property
    def buffer(self) -> Tensor:
        """Clean frames already generated but not yet consumed by the memory."""
        return self.frames[:, self.frontier:]


def _check_actions(actions: Tensor, needed: int):
    if actions.shape[1] < needed:
        raise ValueError(f"actions cover {actions.shape[1]} frames, rollout needs {needed}")


def _advance(model: RadModel, st: RolloutState, actions: Tensor, upto: int, window: int):
    """Feed frames ``frontier .. upto-1`` through a chained clean pass."""
    if upto <= st.frontier or not model.has_memory:
        st.frontier = max(st.frontier, upto)
        return
    x = st.frames[:, st.frontier:upto]
    t = torch.zeros(x.shape[:2], dtype=torch.long)
    _, states = model(x, t, actions[:, st.frontier:upto], window=min(window, x.shape[1]),
                      states=st.states, chain=True)
    st.states = [None if s is None else map_state(s, lambda v: v[:, -1]) for s in states]
    st.trace.append(("memory", st.frontier, upto))
    st.frontier = upto


def _seed(model: RadModel, states: list):
    if not model.has_memory:
        return None
    return [None if s is None else map_state(s, lambda v: v[:, None]) for s in states]


def _denoise(model: RadModel, clean: Tensor, clean_t: Tensor, actions: Tensor, n_new: int, seeds,
             schedule: NoiseSchedule, steps: int, sampler: str, gen: torch.Generator, clip: float | None):
    """Jointly denoise ``n_new`` frames appended after ``clean`` in one attention window."""
    b = actions.shape[0]
    shape = (b, n_new, model.cfg.height, model.cfg.width, model.cfg.channels)
    dtype = model.patch_embed.weight.dtype
    z = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
    window = clean.shape[1] + n_new
    if sampler == "ddim":
        ts = ddim_timesteps(schedule.T, steps)
        pairs = list(zip(ts[:-1], ts[1:]))
    else:
        pairs = [(t, t - 1) for t in range(schedule.T, 0, -1)]
    for t, t_next in pairs:
        tt = torch.cat((clean_t, torch.full((b, n_new), t, dtype=torch.long)), dim=1)
        eps, _ = model(torch.cat((clean, z), dim=1), tt, actions, window, seeds)
        eps = eps[:, -n_new:]
        if sampler == "ddim":
            z = ddim_step(z, t, t_next, eps, schedule, clip=clip)
        else:
            noise = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
            z = ddpm_step(z, t, eps, schedule, noise)
    return z if clip is None else z.clamp(-clip, clip)


def _prepare(model, context, actions, schedule, sampler):
    if sampler not in SAMPLERS:
        raise ConfigError(f"sampler must be one of {SAMPLERS}")
    schedule = schedule or build_schedule(model.cfg.diffusion_steps)
    if context.dim() == 4:
        context = context[None]
    if actions.dim() == 2:
        actions = actions[None]
    dtype = model.patch_embed.weight.dtype
    return context.to(dtype), actions.to(dtype), schedule


@torch.no_grad()
def rollout_framewise(model: RadModel, context: Tensor, actions: Tensor, horizon: int,
                      schedule: NoiseSchedule | None = None, steps: int = 20, sampler: str = "ddim",
                      seed: int = 0, clip: float | None = 1.0, return_state: bool = False):
    """Generate ``horizon`` frames after ``context`` ``[B, K, H, W, C]`` one at a time.

    ``actions`` must cover ``K + horizon`` frames. Returns the full
    ``[B, K + horizon, ...]`` video, plus the :class:`RolloutState` when
    ``return_state`` is set.
    """
    context, actions, schedule = _prepare(model, context, actions, schedule, sampler)
    k = context.shape[1]
    if k < 1:
        raise ValueError("frame-wise rollout needs at least one context frame")
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    _check_actions(actions, k + horizon)
    l = model.cfg.loss_window
    gen = rng(seed, "sample")
    st = RolloutState(context, model.initial_states(context.shape[0], dtype=context.dtype))
    _advance(model, st, actions, max(0, k - l + 1), 1)
    for j in range(k, k + horizon):
        ws = max(0, j - l + 1)
        if ws != st.frontier:
            raise AssertionError("frontier out of step with the attention window")
        st.trace.append(("window", ws, j + 1, st.frontier))
        clean = st.frames[:, ws:j]
        new = _denoise(model, clean, torch.zeros(clean.shape[:2], dtype=torch.long), actions[:, ws:j + 1], 1,
                       _seed(model, st.states), schedule, steps, sampler, gen, clip)
        st.frames = torch.cat((st.frames, new), dim=1)
        # memory update happens only now, after the final denoising step
        _advance(model, st, actions, max(0, j + 2 - l), 1)
        st.history.append(st.frontier)
    return (st.frames, st) if return_state else st.frames


@torch.no_grad()
def rollout_chunkwise(model: RadModel, context: Tensor, actions: Tensor, horizon: int,
                      schedule: NoiseSchedule | None = None, steps: int = 20, sampler: str = "ddim",
                      seed: int = 0, clip: float | None = 1.0, return_state: bool = False):
    """Generate ``horizon`` frames after ``context`` in chunks of the model window.

    The context is consumed in chunk-sized clean passes (the last one may be
    shorter), then generation proceeds in non-overlapping chunks starting
    right after the context, so a generated chunk never attends to context
    pixels and sees the past only through the carried state. When the
    context length is a multiple of the window this is exactly the training
    chunk geometry. The last chunk is padded (actions repeat the final one)
    and the padding is dropped from the returned video. ``context`` may be
    empty.
    """
    context, actions, schedule = _prepare(model, context, actions, schedule, sampler)
    b, k = context.shape[:2]
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    total = k + horizon
    _check_actions(actions, total)
    l = model.cfg.window
    pad = (-horizon) % l
    actions = actions[:, :total]
    if pad:
        actions = torch.cat((actions, actions[:, -1:].expand(b, pad, actions.shape[-1])), dim=1)
    gen = rng(seed, "sample")
    st = RolloutState(context, model.initial_states(b, dtype=context.dtype))
    for s, e, _ in chunk_plan(k, l):
        _advance(model, st, actions, e, e - s)
    for s, e, seed_idx in chunk_plan(total + pad, l, start=k):
        if seed_idx != st.frontier:
            raise AssertionError("frontier out of step with the chunk plan")
        st.trace.append(("window", s, e, seed_idx))
        new = _denoise(model, st.frames[:, s:s], torch.zeros(b, 0, dtype=torch.long), actions[:, s:e], e - s,
                       _seed(model, st.states), schedule, steps, sampler, gen, clip)
        st.frames = torch.cat((st.frames, new), dim=1)
        _advance(model, st, actions, e, l)
        st.history.append(st.frontier)
    st.frames = st.frames[:, :total]
    return (st.frames, st) if return_state else st.frames


def rollout(model: RadModel, context: Tensor, actions: Tensor, horizon: int, **kw):
    """Dispatch on the model's configured paradigm."""
    fn = rollout_framewise if model.cfg.mode == "framewise" else rollout_chunkwise
    return fn(model, context, actions, horizon, **kw)
