"""
Maze-world episodes
===================

The benchmark data comes from a procedural maze. An agent walks out from a
start cell and then retraces its steps, so every frame after the turning
point has already been seen once. Predicting those frames well needs memory.
"""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from rad.mazeworld import ActionCode, MazeSpec, generate_episode, read_dataset, write_dataset

# an 11x11 maze seen through a 3x3-tile window, rendered at 16x16 pixels
spec = MazeSpec(grid=11, resolution=16, view_radius=1)
ep = generate_episode(spec, length=64, seed=7)
print("frames", ep.frames.shape, "actions", ep.actions.shape, "range", ep.frames.min(), ep.frames.max())

# the outbound walk takes M = (L-1)//2 actions; frame t reappears as frame 2M - t
M = (64 - 1) // 2
print("revisits identical:", all(np.array_equal(ep.frames[t], ep.frames[2 * M - t]) for t in range(M + 1)))

names = [ActionCode(int(i)).name for i in ep.actions.argmax(-1)[:10]]
print("first actions:", names)

# episodes round-trip through the RADV container without loss
out = Path(tempfile.mkdtemp())
write_dataset([ep], out / "one.radv")
(frames, actions), = read_dataset(out / "one.radv")
print("round trip exact:", np.array_equal(frames, ep.frames) and np.array_equal(actions, ep.actions))

# a filmstrip of every fourth frame, upscaled for viewing
strip = np.concatenate(list(ep.frames[::4]), axis=1)
img = Image.fromarray(((strip + 1) * 127.5).round().astype(np.uint8)).resize((strip.shape[1] * 4, 64), Image.NEAREST)
img.save(out / "filmstrip.png")
print("wrote", out / "filmstrip.png")
