"""Procedural grid-world videos with out-and-back trajectories.

An agent walks a random path through a perfect maze whose floor tiles have
random colours, then retraces the path in reverse. Frames are rendered
egocentrically (heading up), so the second half of every episode revisits
poses from the first half and must reproduce those frames exactly; a model
can only predict them if it remembers what it saw.

Episodes are stored in the RADV container: little-endian, magic ``RADV``,
``u16`` version, ``u32`` episode count, then per episode a header
``u32 L, u16 H, u16 W, u16 C, u16 A`` followed by ``L*H*W*C`` pixel bytes
and ``L*A`` one-hot action bytes.
"""

from __future__ import annotations

import enum
import io
import os
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nn import ConfigError

# heading 0 faces north (row - 1), then clockwise
_STEP = np.array([(-1, 0), (0, 1), (1, 0), (0, -1)])
WALL = np.array([96, 96, 96], dtype=np.uint8)


class ActionCode(enum.IntEnum):
    FORWARD = 0
    BACK = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3
    STAY = 4

    @property
    def inverse(self) -> "ActionCode":
        return _INVERSE[self]


_INVERSE = {
    ActionCode.FORWARD: ActionCode.BACK,
    ActionCode.BACK: ActionCode.FORWARD,
    ActionCode.TURN_LEFT: ActionCode.TURN_RIGHT,
    ActionCode.TURN_RIGHT: ActionCode.TURN_LEFT,
    ActionCode.STAY: ActionCode.STAY,
}
N_ACTIONS = len(ActionCode)


@dataclass(frozen=True)
class MazeSpec:
    grid: int = 11
    resolution: int = 16
    view_radius: int = 1
    channels: int = 3

    def __post_init__(self):
        if self.grid < 5 or self.grid % 2 == 0:
            raise ConfigError("maze grid must be odd and at least 5")
        if self.resolution < 4:
            raise ConfigError("resolution must be at least 4")
        if self.view_radius < 0:
            raise ConfigError("view radius must be non-negative")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")

    @property
    def tile_px(self) -> int:
        return -(-self.resolution // (2 * self.view_radius + 1))


class Maze(NamedTuple):
    walls: np.ndarray  # [G, G] bool
    colors: np.ndarray  # [G, G, 3] uint8


class Episode(NamedTuple):
    frames: np.ndarray  # [L, H, W, C] float32 in [-1, 1]
    actions: np.ndarray  # [L, A] float32 one-hot
    poses: np.ndarray  # [L, 3] int (row, col, heading)


def make_maze(grid: int, rng: np.random.Generator) -> Maze:
    """Perfect maze carved by randomized depth-first search on odd cells."""
    walls = np.ones((grid, grid), dtype=bool)
    start = (1, 1)
    walls[start] = False
    stack = [start]
    while stack:
        r, c = stack[-1]
        nbrs = [(r + 2 * dr, c + 2 * dc) for dr, dc in _STEP
                if 0 < r + 2 * dr < grid - 1 and 0 < c + 2 * dc < grid - 1 and walls[r + 2 * dr, c + 2 * dc]]
        if not nbrs:
            stack.pop()
            continue
        nr, nc = nbrs[rng.integers(len(nbrs))]
        walls[(r + nr) // 2, (c + nc) // 2] = False
        walls[nr, nc] = False
        stack.append((nr, nc))
    colors = rng.integers(32, 256, size=(grid, grid, 3), dtype=np.uint8)
    colors[walls] = WALL
    return Maze(walls, colors)


def step_pose(walls: np.ndarray, pose, action: int):
    """Apply one action; blocked moves leave the pose unchanged."""
    r, c, h = pose
    if action == ActionCode.TURN_LEFT:
        return r, c, (h - 1) % 4
    if action == ActionCode.TURN_RIGHT:
        return r, c, (h + 1) % 4
    if action in (ActionCode.FORWARD, ActionCode.BACK):
        sign = 1 if action == ActionCode.FORWARD else -1
        nr, nc = r + sign * _STEP[h][0], c + sign * _STEP[h][1]
        if 0 <= nr < walls.shape[0] and 0 <= nc < walls.shape[1] and not walls[nr, nc]:
            return int(nr), int(nc), h
    return r, c, h


def render(maze: Maze, pose, spec: MazeSpec) -> np.ndarray:
    """Egocentric heading-up view around ``pose`` as ``uint8 [H, W, C]``."""
    r, c, h = pose
    k = spec.view_radius
    g = maze.colors.shape[0]
    padded = np.empty((g + 2 * k, g + 2 * k, 3), dtype=np.uint8)
    padded[:] = WALL  # outside the grid looks like wall
    padded[k:k + g, k:k + g] = maze.colors
    view = padded[r:r + 2 * k + 1, c:c + 2 * k + 1]
    # rotate so the heading points up; rot90 turns counterclockwise
    view = np.rot90(view, h)
    img = np.repeat(np.repeat(view, spec.tile_px, 0), spec.tile_px, 1)
    off = (img.shape[0] - spec.resolution) // 2
    img = img[off:off + spec.resolution, off:off + spec.resolution]
    if spec.channels == 1:
        img = img.mean(-1, keepdims=True).round().astype(np.uint8)
    return np.ascontiguousarray(img)


def _walk(walls, start, n, rng):
    """Random walk of ``n`` actions that all change or keep the pose reversibly."""
    pose, acts = start, []
    for _ in range(n):
        choices, probs = [ActionCode.TURN_LEFT, ActionCode.TURN_RIGHT, ActionCode.STAY], [0.2, 0.2, 0.05]
        for a, p in ((ActionCode.FORWARD, 0.5), (ActionCode.BACK, 0.05)):
            if step_pose(walls, pose, a) != pose:
                choices.append(a)
                probs.append(p)
        probs = np.asarray(probs) / sum(probs)
        a = choices[rng.choice(len(choices), p=probs)]
        acts.append(a)
        pose = step_pose(walls, pose, a)
    return acts


def to_u8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(frames) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_u8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / 127.5 - 1.0


def generate_episode(spec: MazeSpec, length: int, seed, max_retries: int = 16) -> Episode:
    """Render an out-and-back episode of ``length`` frames.

    ``actions[t]`` is the action leading into frame ``t`` (``actions[0]`` is
    stay). The outbound walk takes ``(length - 1) // 2`` actions and the
    return replays their inverses in reverse order, so frame ``t`` equals
    frame ``2M - t``. Walks that explore fewer than three cells are re-rolled.
    """
    if length < 10:
        raise ValueError("episodes need at least 10 frames")
    rng = np.random.default_rng(seed)
    m = (length - 1) // 2
    for _ in range(max_retries):
        maze = make_maze(spec.grid, rng)
        cells = np.argwhere(~maze.walls)
        r, c = cells[rng.integers(len(cells))]
        start = (int(r), int(c), int(rng.integers(4)))
        out = _walk(maze.walls, start, m, rng)
        poses = [start]
        for a in out:
            poses.append(step_pose(maze.walls, poses[-1], a))
        if len({p[:2] for p in poses}) >= 3:
            break
    else:
        raise RuntimeError(f"no usable walk after {max_retries} attempts")
    back = [a.inverse for a in reversed(out)]
    acts = [ActionCode.STAY] + out + back
    acts += [ActionCode.STAY] * (length - len(acts))
    poses = [start]
    for a in acts[1:]:
        poses.append(step_pose(maze.walls, poses[-1], a))
    raw = np.stack([render(maze, p, spec) for p in poses])
    onehot = np.eye(N_ACTIONS, dtype=np.float32)[np.asarray(acts, dtype=int)]
    return Episode(from_u8(raw), onehot, np.asarray(poses, dtype=np.int64))


def generate_dataset(spec: MazeSpec, episodes: int, length: int, seed: int = 0) -> list[Episode]:
    """Independent episodes, episode ``i`` seeded by ``(seed, i)``."""
    return [generate_episode(spec, length, [seed, i]) for i in range(episodes)]


def stack_episodes(episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray]:
    """``(frames [E, L, H, W, C], actions [E, L, A])`` for equal-length episodes."""
    if not episodes:
        raise ValueError("no episodes")
    return np.stack([e.frames for e in episodes]), np.stack([e.actions for e in episodes])


# -- RADV container ----------------------------------------------------------

MAGIC = b"RADV"
VERSION = 1
_HEADER = struct.Struct("<IHHHH")


class DatasetFormatError(ValueError):
    pass


def write_dataset(episodes, path):
    """Write ``(frames, actions)`` pairs (or :class:`Episode` objects) atomically."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(episodes)))
    shape = None
    for ep in episodes:
        frames, actions = ep[0], ep[1]
        length, h, w, c = frames.shape
        if shape is not None and (h, w, c) != shape:
            raise ValueError("episodes must share one resolution")
        shape = (h, w, c)
        if actions.shape[0] != length:
            raise ValueError("one action per frame required")
        buf.write(_HEADER.pack(length, h, w, c, actions.shape[1]))
        buf.write(to_u8(frames).tobytes())
        buf.write((np.asarray(actions) > 0.5).astype(np.uint8).tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _take(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise DatasetFormatError("truncated dataset file")
    return raw


def read_dataset(path) -> list[tuple[np.ndarray, np.ndarray]]:
    """Read a RADV file into ``(frames float32 [-1, 1], actions float32)`` pairs."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise DatasetFormatError(f"{path}: bad magic, not a RADV dataset")
        version, count = struct.unpack("<HI", _take(fh, 6))
        if version != VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {version}")
        out = []
        for _ in range(count):
            length, h, w, c, a = _HEADER.unpack(_take(fh, _HEADER.size))
            raw = np.frombuffer(_take(fh, length * h * w * c), dtype=np.uint8).reshape(length, h, w, c)
            acts = np.frombuffer(_take(fh, length * a), dtype=np.uint8).reshape(length, a)
            out.append((from_u8(raw), acts.astype(np.float32)))
        if fh.read(1):
            raise DatasetFormatError(f"{path}: trailing bytes after {count} episodes")
    return out
