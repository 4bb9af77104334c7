"""Chunk-wise and frame-wise training with hidden-state prefetch.

Frame-wise training first runs the model with window 1 over the clean
frames (the prefetch pass), which yields the recurrent state at every frame
boundary of every layer. Randomly chosen subsequences of the loss-window
length are then noised and evaluated in one batched pass, each seeded with
the banked state preceding its first frame.

Chunk-wise training splits the sequence into non-overlapping windows,
computes the carried states with a chained clean pass and evaluates all
chunks in parallel, grouped into chunk batches to bound memory.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import config as flatcfg
from .diffusion import NoiseSchedule, build_schedule, forward_diffuse, sample_timesteps
from .model import HiddenStateBank, RadModel, load_model, rad_forward, save_checkpoint
from .nn import ConfigError

log = logging.getLogger(__name__)

STREAMS = {"data": 1, "noise": 2, "timesteps": 3, "subsequences": 4, "init": 5, "sample": 6, "memory": 7}


def rng(seed: int, name: str, step: int = 0) -> torch.Generator:
    """Independent generator for a named random sub-stream at a given step."""
    state = np.random.SeedSequence([seed, STREAMS[name], step]).generate_state(2, np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 31 ^ int(state[1]))


@dataclass
class WindowSpec:
    mode: str
    window: int
    loss_window: int
    stride: int = 0
    causal: bool = True

    def __post_init__(self):
        if self.stride == 0:
            self.stride = self.window if self.mode == "chunkwise" else 1
        if self.mode == "chunkwise" and self.stride != self.window:
            raise ConfigError("chunk-wise windows must not overlap (stride == window)")
        if self.mode == "framewise" and self.stride != 1:
            raise ConfigError("frame-wise training slides with stride 1")

    @classmethod
    def from_model(cls, model: RadModel) -> "WindowSpec":
        cfg = model.cfg
        return cls(cfg.mode, cfg.window, cfg.loss_window)


@dataclass
class TrainConfig:
    lr: float = 8e-5
    batch_size: int = 8
    seq_len: int = 0  # 0 keeps the full episode
    subsequences: int = 4
    chunk_batches: int = 1
    clean_memory: bool = True
    steps: int = 1000
    seed: int = 0
    grad_clip: float = 1.0
    bptt: int = 0  # 0 means twice the loss window, negative means untruncated
    checkpoint_every: int = 500

    def horizon(self, loss_window: int) -> int | None:
        if self.bptt < 0:
            return None
        return self.bptt or 2 * loss_window

    def to_text(self) -> str:
        return flatcfg.to_flat(self)


def _check_finite(bank: HiddenStateBank):
    for d, st in enumerate(bank.layers):
        if st is None:
            continue
        for field in st:
            bad = ~torch.isfinite(field.reshape(field.shape[0], field.shape[1], -1)).all(-1).all(0)
            if bad.any():
                t = int(bad.nonzero()[0])
                raise FloatingPointError(f"non-finite recurrent state at layer {d}, frame {t - 1}")


def prefetch_hidden_states(model: RadModel, frames: Tensor, actions: Tensor, timesteps: Tensor | None = None,
                           detach_every: int | None = None) -> HiddenStateBank:
    """Window-1 chained pass over ``frames`` collecting every per-layer state.

    ``timesteps`` defaults to zeros (clean memory); passing noised frames with
    their timesteps reproduces the noised-memory ablation.
    """
    if timesteps is None:
        timesteps = torch.zeros(frames.shape[:2], dtype=torch.long)
    _, states = model(frames, timesteps, actions, window=1, chain=True, detach_every=detach_every)
    bank = HiddenStateBank(states)
    _check_finite(bank)
    return bank


def sample_starts(batch: int, length: int, loss_window: int, n: int, generator) -> Tensor:
    """``[batch, n]`` subsequence starts drawn without replacement from ``0..length-loss_window``."""
    n_max = length - loss_window + 1
    if n_max < 1:
        raise ConfigError(f"sequence of {length} frames is shorter than the loss window {loss_window}")
    if n > n_max:
        warnings.warn(f"{n} subsequences requested but only {n_max} exist; clamping", stacklevel=3)
        n = n_max
    return torch.stack([torch.randperm(n_max, generator=generator)[:n] for _ in range(batch)])


def gather_windows(x: Tensor, starts: Tensor, length: int) -> Tensor:
    """Concatenate windows ``x[b, s:s+length]`` for ``starts`` ``[B, N]`` into ``[B, N*length, ...]``."""
    b, n = starts.shape
    idx = (starts[:, :, None] + torch.arange(length)).reshape(b, n * length)
    return x[torch.arange(b)[:, None], idx]


def _noise_draws(shape, like: Tensor, T: int, cfg: TrainConfig, step: int):
    t = sample_timesteps(shape[:2], T, rng(cfg.seed, "timesteps", step))
    eps = torch.randn(shape, generator=rng(cfg.seed, "noise", step), dtype=torch.float64).to(like.dtype)
    return t, eps


def _memory_frames(frames, cfg: TrainConfig, schedule: NoiseSchedule, step: int, noise=None):
    """Frames and timesteps that feed the recurrent memory."""
    if cfg.clean_memory:
        return frames, torch.zeros(frames.shape[:2], dtype=torch.long)
    if noise is None:
        gen = rng(cfg.seed, "memory", step)
        t = sample_timesteps(frames.shape[:2], schedule.T, gen)
        eps = torch.randn(frames.shape, generator=gen, dtype=torch.float64).to(frames.dtype)
    else:
        t, eps = noise
    return forward_diffuse(frames, t, eps, schedule), t


def framewise_errors(model: RadModel, frames: Tensor, actions: Tensor, schedule: NoiseSchedule,
                     cfg: TrainConfig, step: int = 0, starts: Tensor | None = None, noise=None,
                     memory_noise=None):
    """Per-frame squared errors of the frame-wise objective.

    Returns ``(errors [B, N*l'], timesteps [B, N*l'], starts [B, N], bank)``.
    ``noise`` may supply the ``(t, eps)`` draws for the gathered windows.
    """
    b, length = frames.shape[:2]
    lw = model.cfg.loss_window
    if starts is None:
        starts = sample_starts(b, length, lw, cfg.subsequences, rng(cfg.seed, "subsequences", step))
    if model.has_memory:
        mem, mem_t = _memory_frames(frames, cfg, schedule, step, memory_noise)
        bank = prefetch_hidden_states(model, mem, actions, mem_t, cfg.horizon(lw))
    else:
        bank = HiddenStateBank([None] * len(model.blocks))
    z0 = gather_windows(frames, starts, lw)
    a = gather_windows(actions, starts, lw)
    t, eps = noise if noise is not None else _noise_draws(z0.shape, z0, schedule.T, cfg, step)
    zt = forward_diffuse(z0, t, eps, schedule)
    eps_hat = rad_forward(model, zt, t, a, bank, lw, starts=starts)
    err = ((eps_hat - eps) ** 2).flatten(2).mean(-1)
    return err, t, starts, bank


def _reduce(err: Tensor, t: Tensor) -> Tensor:
    mask = (t > 0).to(err.dtype)
    return (err * mask).sum() / mask.sum().clamp_min(1)


def framewise_train_step(model, frames, actions, schedule, cfg: TrainConfig, step: int = 0, **kw) -> Tensor:
    """Diffusion-forcing loss of the frame-wise paradigm (graph attached for backward)."""
    err, t, _, _ = framewise_errors(model, frames, actions, schedule, cfg, step, **kw)
    return _reduce(err, t)


def chunk_plan(length: int, window: int, start: int = 0) -> list[tuple[int, int, int]]:
    """``(first, end, seed_index)`` for each non-overlapping chunk from ``start`` onward."""
    return [(s, min(s + window, length), s) for s in range(start, length, window)]


def chunkwise_errors(model: RadModel, frames: Tensor, actions: Tensor, schedule: NoiseSchedule,
                     cfg: TrainConfig, step: int = 0, noise=None, trace: list | None = None):
    """Per-frame squared errors of the chunk-wise objective, ``(errors [B, L], t [B, L])``."""
    b, length = frames.shape[:2]
    l = model.cfg.window
    pad = (-length) % l
    if pad:
        frames = torch.cat((frames, frames[:, -1:].expand(b, pad, *frames.shape[2:])), dim=1)
        actions = torch.cat((actions, actions[:, -1:].expand(b, pad, actions.shape[-1])), dim=1)
    lp = length + pad
    t, eps = noise if noise is not None else _noise_draws(frames.shape[:1] + (length,) + frames.shape[2:],
                                                         frames, schedule.T, cfg, step)
    if pad:
        t = torch.cat((t, torch.zeros(b, pad, dtype=t.dtype)), dim=1)
        eps = torch.cat((eps, torch.zeros_like(frames[:, :pad])), dim=1)
    zt = forward_diffuse(frames, t, eps, schedule)
    plan = chunk_plan(lp, l)
    if trace is not None:
        trace.extend((s, e, seed) for s, e, seed in plan)

    if not model.has_memory:
        eps_hat, _ = model(zt, t, actions, l, chain=True)
    elif not cfg.clean_memory:
        # noised-memory ablation: states carried straight from the noisy pass
        eps_hat, _ = model(zt, t, actions, l, chain=True, detach_every=cfg.horizon(l))
    else:
        clean_t = torch.zeros(b, lp, dtype=torch.long)
        _, states = model(frames, clean_t, actions, l, chain=True, detach_every=cfg.horizon(l))
        bank = HiddenStateBank(states)
        _check_finite(bank)
        chunks = np.array_split(np.arange(len(plan)), max(1, min(cfg.chunk_batches, len(plan))))
        parts = [None] * len(plan)
        for group in chunks:
            if not len(group):
                continue
            starts = torch.tensor([plan[c][0] for c in group])
            idx = (starts[:, None] + torch.arange(l)).reshape(-1)
            out = rad_forward(model, zt[:, idx], t[:, idx], actions[:, idx], bank, l, starts=starts)
            for j, c in enumerate(group):
                parts[c] = out[:, j * l:(j + 1) * l]
        eps_hat = torch.cat(parts, dim=1)
    err = ((eps_hat - eps) ** 2).flatten(2).mean(-1)
    return err[:, :length], t[:, :length]


def chunkwise_train_step(model, frames, actions, schedule, cfg: TrainConfig, step: int = 0, **kw) -> Tensor:
    """Diffusion-forcing loss of the chunk-wise paradigm (graph attached for backward)."""
    err, t = chunkwise_errors(model, frames, actions, schedule, cfg, step, **kw)
    return _reduce(err, t)


def train_step(model, frames, actions, schedule, cfg: TrainConfig, step: int = 0) -> Tensor:
    if model.cfg.mode == "framewise":
        return framewise_train_step(model, frames, actions, schedule, cfg, step)
    return chunkwise_train_step(model, frames, actions, schedule, cfg, step)


class TrainingDiverged(FloatingPointError):
    pass


def _batch(dataset, cfg: TrainConfig, step: int):
    frames, actions = dataset
    gen = rng(cfg.seed, "data", step)
    idx = torch.randint(0, frames.shape[0], (cfg.batch_size,), generator=gen)
    x = torch.as_tensor(frames[idx.numpy()])
    a = torch.as_tensor(actions[idx.numpy()])
    length = x.shape[1]
    if cfg.seq_len and cfg.seq_len < length:
        s = int(torch.randint(0, length - cfg.seq_len + 1, (1,), generator=gen))
        x, a = x[:, s:s + cfg.seq_len], a[:, s:s + cfg.seq_len]
    return x.float(), a.float()


def _adam_blobs(model, opt) -> dict:
    out = {}
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if st:
            out[f"adam.exp_avg.{name}"] = st["exp_avg"]
            out[f"adam.exp_avg_sq.{name}"] = st["exp_avg_sq"]
    return out


def _restore_adam(model, opt, blobs: dict, step: int):
    for name, p in model.named_parameters():
        key = f"adam.exp_avg.{name}"
        if key in blobs:
            opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": blobs[key].clone(),
                "exp_avg_sq": blobs[f"adam.exp_avg_sq.{name}"].clone(),
            }


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)


def optimize(model: RadModel, dataset, cfg: TrainConfig, out_dir, schedule: NoiseSchedule | None = None,
             resume: bool = False, progress=None) -> list[dict]:
    """Adam loop writing ``loss.csv`` and ``step_XXXXXX.radm`` checkpoints to ``out_dir``.

    ``dataset`` is ``(frames [E, L, H, W, C], actions [E, L, A])``. With
    ``resume`` the latest checkpoint in ``out_dir`` (model and Adam moments)
    is restored and training continues to ``cfg.steps``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = schedule or build_schedule(model.cfg.diffusion_steps)
    opt = make_optimizer(model, cfg)
    start = 0
    latest = out / "latest.radm"
    if resume and latest.exists():
        loaded, meta, blobs = load_model(latest)
        model.load_state_dict(loaded.state_dict())
        start = int(meta.get("step", 0))
        _restore_adam(model, opt, blobs, start)
    else:
        _write_checkpoint(out, model, opt, 0, cfg)
    csv_path = out / "loss.csv"
    if start == 0 and not (resume and csv_path.exists()):
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["step", "loss", "grad_norm", "seconds"])
    history = []
    params = [p for p in model.parameters() if p.requires_grad]
    for step in range(start + 1, cfg.steps + 1):
        t0 = time.perf_counter()
        frames, actions = _batch(dataset, cfg, step)
        loss = train_step(model, frames, actions, schedule, cfg, step)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss is {loss.item()} at step {step}; last good checkpoint kept")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
        opt.step()
        secs = time.perf_counter() - t0
        row = {"step": step, "loss": loss.item(), "grad_norm": gnorm, "seconds": secs}
        history.append(row)
        with open(csv_path, "a", newline="") as fh:
            csv.writer(fh).writerow([step, repr(row["loss"]), repr(gnorm), f"{secs:.4f}"])
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 or step == cfg.steps:
            _write_checkpoint(out, model, opt, step, cfg)
        if progress is not None:
            progress(row)
    return history


def _write_checkpoint(out: Path, model, opt, step: int, cfg: TrainConfig):
    meta = {"step": step, **{f"train.{k}": v for k, v in flatcfg.parse_flat(cfg.to_text()).items()}}
    path = out / f"step_{step:06d}.radm"
    save_checkpoint(path, model, meta, _adam_blobs(model, opt))
    save_checkpoint(out / "latest.radm", model, meta, _adam_blobs(model, opt))
