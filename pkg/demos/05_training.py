"""
Training in both paradigms
==========================

Frame-wise training first runs a cheap window-1 pass over the clean episode
to collect the recurrent state at every frame boundary. It then draws a few
short windows per episode, noises them, and seeds each window from the
collected state at its start. Chunk-wise training cuts the episode into
non-overlapping chunks and carries the state from chunk to chunk.

Run from the repository root; the checkpoint lands in ``demo_run/`` and is
reused by the rollout demo.
"""

import time
from dataclasses import replace

import torch

from rad.benchmark import desk_config, desk_train_config, maze_data
from rad.model import RadModel, load_model
from rad.training import optimize

torch.set_num_threads(1)
train = maze_data(200, length=32, seed=0)
print("training data:", train[0].shape)

for mode in ("framewise", "chunkwise"):
    cfg = desk_config(mode, "lstm", dim=48, heads=4, window=8, loss_window=8)
    tcfg = desk_train_config(seed=0, steps=60, batch_size=4, checkpoint_every=60)
    torch.manual_seed(0)
    model = RadModel(cfg)
    t0 = time.time()
    hist = optimize(model, train, tcfg, f"demo_run/{mode}")
    first = sum(r["loss"] for r in hist[:10]) / 10
    last = sum(r["loss"] for r in hist[-10:]) / 10
    print(f"{mode:9s} loss {first:.3f} -> {last:.3f} in {time.time() - t0:.0f}s")

# checkpoints hold the config, the weights and the Adam moments, so a run resumes exactly
model, meta, _ = load_model("demo_run/framewise/latest.radm")
print("restored step", meta["step"], "mode", model.cfg.mode)

# the resumed run continues from the stored step
more = optimize(model, train, replace(tcfg, steps=70), "demo_run/framewise", resume=True)
print("resumed steps:", more[0]["step"], "..", more[-1]["step"])
