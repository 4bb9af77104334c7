"""Desk-scale maze-world memory benchmark: train an arm, roll it out, score it.

An arm is one (paradigm, recurrent block) pair trained from a seed. Each arm
is trained on the same generated episodes and evaluated on held-out ones
with 60% of every episode given as context.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .inference import rollout, split_context
from .mazeworld import MazeSpec, generate_dataset, stack_episodes
from .metrics import MetricReport, evaluate_episode, per_frame_curves
from .model import RadConfig, RadModel
from .training import TrainConfig, optimize, rng

log = logging.getLogger(__name__)


def desk_config(mode: str = "framewise", rnn: str = "lstm", **kw) -> RadConfig:
    """Model used by the maze benchmark: 2 layers, width 64, 4x4 patches on 16x16 frames."""
    base = dict(layers=2, dim=64, heads=4, patch=4, height=16, width=16, channels=3, window=8,
                loss_window=8, mlp_ratio=2, mode=mode, rnn=rnn)
    base.update(kw)
    return RadConfig(**base)


def maze_data(episodes: int, length: int = 64, seed: int = 0, spec: MazeSpec | None = None):
    """``(frames, actions)`` arrays of generated out-and-back episodes."""
    spec = spec or MazeSpec(resolution=16)
    return stack_episodes(generate_dataset(spec, episodes, length, seed))


@torch.no_grad()
def evaluate_model(model: RadModel, frames, actions, context_fraction: float = 0.6, steps: int = 20,
                   sampler: str = "ddim", seed: int = 0, batch: int = 32, first_episode: int = 0):
    """Roll out every episode from its context and score the target frames.

    Episodes are processed ``batch`` at a time. Returns the per-episode
    :class:`MetricReport` list and the generated videos ``[E, L, H, W, C]``.
    """
    model.eval()
    frames = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    actions = torch.as_tensor(np.asarray(actions), dtype=torch.float32)
    context = split_context(frames, context_fraction)[0].shape[1]
    horizon = frames.shape[1] - context
    videos, reports = [], []
    for s in range(0, frames.shape[0], batch):
        x, a = frames[s:s + batch], actions[s:s + batch]
        video = rollout(model, x[:, :context], a, horizon, steps=steps, sampler=sampler, seed=seed * 1_000_003 + s)
        videos.append(video)
        for i in range(video.shape[0]):
            reports.append(evaluate_episode(video[i], x[i], context, episode=first_episode + s + i))
    return reports, torch.cat(videos).numpy()


@dataclass
class ArmResult:
    name: str
    seed: int
    reports: list[MetricReport]
    curves: list[dict]
    history: list[dict] = field(repr=False, default_factory=list)

    @property
    def ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.reports]))

    @property
    def psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.reports]))


def run_arm(model_cfg: RadConfig, train_cfg: TrainConfig, train_data, eval_data, out_dir, name: str = "",
            eval_steps: int = 20, eval_batch: int = 32, progress=None) -> ArmResult:
    """Train one arm from ``train_cfg.seed`` and evaluate it on ``eval_data``."""
    out = Path(out_dir)
    torch.manual_seed(int(rng(train_cfg.seed, "init").initial_seed()))
    model = RadModel(model_cfg)
    history = optimize(model, train_data, train_cfg, out, progress=progress)
    reports, _ = evaluate_model(model, *eval_data, steps=eval_steps, seed=train_cfg.seed, batch=eval_batch)
    curves = per_frame_curves(reports, out / "curves.csv")
    result = ArmResult(name or f"{model_cfg.mode}-{model_cfg.rnn}", train_cfg.seed, reports, curves, history)
    log.info("%s seed %d: ssim %.4f psnr %.2f", result.name, result.seed, result.ssim, result.psnr)
    return result


def desk_train_config(seed: int, steps: int = 2000, **kw) -> TrainConfig:
    base = dict(lr=1e-3, batch_size=8, subsequences=4, steps=steps, seed=seed, checkpoint_every=0)
    base.update(kw)
    return TrainConfig(**base)


__all__ = ["ArmResult", "desk_config", "desk_train_config", "evaluate_model", "maze_data", "run_arm"]
