"""
Rollouts and memory metrics
===========================

The first 60% of each episode is given as context and the model generates the
rest. Frame-wise rollout denoises one frame at a time inside a sliding window.
Chunk-wise rollout denoises whole chunks and reaches back only through the
recurrent state. Predictions are scored with PSNR and SSIM on the target
frames, plus per-frame curves whose step at the context boundary shows how
well the state carried the past.

Uses the checkpoint written by ``05_training.py`` when it exists.
"""

from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from rad.benchmark import desk_config, evaluate_model, maze_data
from rad.inference import rollout
from rad.metrics import boundary_drop, per_frame_curves, psnr, ssim, to_unit
from rad.model import RadModel, load_model

torch.set_num_threads(1)
ckpt = Path("demo_run/framewise/latest.radm")
if ckpt.exists():
    model, _, _ = load_model(ckpt)
else:
    print("no checkpoint found, using an untrained model")
    model = RadModel(desk_config(dim=48, heads=4))

frames, actions = maze_data(8, length=32, seed=123)

# the metrics work on [0, 1] images: identical frames score SSIM 1 and a uniform 0.1 offset is 20 dB
a = to_unit(frames[0, 0])
print("ssim(a, a) =", ssim(a, a), " psnr with mse 0.01 =", psnr(a + 0.1, a))

reports, videos = evaluate_model(model, frames, actions, steps=10, batch=8)
print(f"frame-wise:  ssim {np.mean([r.ssim for r in reports]):.3f}  psnr {np.mean([r.psnr for r in reports]):.2f}")
curves = per_frame_curves(reports, "demo_run/curves.csv")
k = int(reports[0].mask.argmax())  # first target frame
print("boundary drop at frame", k, "=", round(boundary_drop(curves, k), 3))

# the same weights can be driven chunk-wise; the window decides the chunk length
chunky = RadModel(replace(model.cfg, mode="chunkwise"))
chunky.load_state_dict(model.state_dict())
x = torch.as_tensor(frames[:2])
video = rollout(chunky, x[:, :k], torch.as_tensor(actions[:2]), 32 - k, steps=10)
print("chunk-wise video:", tuple(video.shape), " context kept:", torch.equal(video[:, :k], x[:, :k]))
