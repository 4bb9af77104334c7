"""The RAD network: factorized spatial/temporal attention DiT with recurrent memory.

Tokens live in a ``[B, L, P, d]`` grid (``P`` spatial tokens per frame).
Every block runs spatial attention, windowed temporal attention, the
recurrent block along time per spatial token, and an optional feed-forward
layer; each sub-layer is adaLN-modulated and gated-residual.

The model runs in one of two state modes:

* chained (``chain=True``): the recurrent block folds over the whole
  sequence from an initial state, attention is windowed. With window 1 this
  is the hidden-state prefetch pass; with the chunk length it is the
  chunk-wise clean pass. All intermediate states are returned.
* seeded (``chain=False``): each attention window runs its own recurrent
  scan from a caller-supplied seed state, so all windows are independent
  and evaluated in one batch.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import config as flatcfg
from .memory import RNN_TYPES, build_block, concat_action, index_state, map_state
from .nn import (
    AttentionLayout,
    ConfigError,
    Linear,
    RoPEParams,
    adaln_modulate,
    apply_rope,
    apply_rope_2d,
    causal_mask,
    layer_norm,
    softmax_attention,
    timestep_embedding,
)

MODES = ("chunkwise", "framewise")


class StateError(ValueError):
    """A window was evaluated without the recurrent state it needs."""


@dataclass
class RadConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    patch: int = 4
    height: int = 16
    width: int = 16
    channels: int = 3
    window: int = 8
    loss_window: int = 8
    rnn: str = "lstm"
    mode: str = "framewise"
    action_dim: int = 5
    action_into_rnn: bool = True
    action_rnn_dim: int = 16
    feed_forward: bool = True
    mlp_ratio: int = 4
    diffusion_steps: int = 50
    lstm_hidden: int = 0
    ssm_state: int = 16
    ssm_conv: int = 4
    ssm_expand: int = 2
    ttt_heads: int = 2
    ttt_lr: float = 0.03
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.window < 1 or self.loss_window < 1:
            raise ConfigError("window lengths must be >= 1")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 4:
            raise ConfigError("head dim must be divisible by 4 for 2D RoPE")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide {self.height}x{self.width}")
        if self.rnn not in RNN_TYPES:
            raise ConfigError(f"rnn must be one of {RNN_TYPES}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def tokens(self) -> int:
        h, w = self.grid
        return h * w

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def rnn_input_dim(self) -> int:
        return self.dim + (self.action_rnn_dim if self.action_into_rnn else 0)

    def to_text(self) -> str:
        return flatcfg.to_flat(self)

    @classmethod
    def from_text(cls, text: str) -> "RadConfig":
        return flatcfg.from_flat(cls, flatcfg.parse_flat(text))


def patchify(frames: Tensor, patch: int) -> Tensor:
    """``[B, L, H, W, C]`` frames to ``[B, L, H/p, W/p, p*p*C]`` patches."""
    b, l, h, w, c = frames.shape
    if h % patch or w % patch:
        raise ConfigError(f"patch {patch} does not divide {h}x{w}")
    x = frames.reshape(b, l, h // patch, patch, w // patch, patch, c)
    return x.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, l, h // patch, w // patch, patch * patch * c)


def unpatchify(tokens: Tensor, patch: int, channels: int) -> Tensor:
    b, l, gh, gw, _ = tokens.shape
    x = tokens.reshape(b, l, gh, gw, patch, patch, channels)
    return x.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, l, gh * patch, gw * patch, channels)


def adaln_head(d: int, n_out: int = 3) -> Linear:
    """Zero-weight modulation head producing gamma=1, beta=0 (and alpha=0)."""
    head = Linear(d, n_out * d, init="zeros")
    with torch.no_grad():
        head.bias.zero_()
        head.bias[:d] = 1.0
    return head


class RadBlock(nn.Module):
    def __init__(self, cfg: RadConfig):
        super().__init__()
        d = cfg.dim
        self.cfg = cfg
        self.heads = cfg.heads
        self.spatial_qkv = Linear(d, 3 * d)
        self.spatial_out = Linear(d, d)
        self.spatial_mod = adaln_head(d)
        self.temporal_qkv = Linear(d, 3 * d)
        self.temporal_out = Linear(d, d)
        self.temporal_mod = adaln_head(d)
        self.rnn = build_block(
            cfg.rnn, cfg.rnn_input_dim, d,
            lstm_hidden=cfg.lstm_hidden, ssm_state=cfg.ssm_state, ssm_conv=cfg.ssm_conv,
            ssm_expand=cfg.ssm_expand, ttt_heads=cfg.ttt_heads, ttt_lr=cfg.ttt_lr,
        )
        if self.rnn is not None:
            self.rnn_mod = adaln_head(d)
            self.action_proj = Linear(cfg.action_dim, cfg.action_rnn_dim) if cfg.action_into_rnn else None
        if cfg.feed_forward:
            self.ff_in = Linear(d, cfg.mlp_ratio * d)
            self.ff_out = Linear(cfg.mlp_ratio * d, d)
            self.ff_mod = adaln_head(d)

    def _attend(self, x: Tensor, qkv: Linear, out: Linear, rope, mask) -> Tensor:
        g, n, d = x.shape
        dh = d // self.heads
        q, k, v = qkv(x).reshape(g, n, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        o = softmax_attention(rope(q), rope(k), v, mask)
        return out(o.transpose(1, 2).reshape(g, n, d))

    def forward(self, x: Tensor, cond: Tensor, actions: Tensor, window: int, state=None,
                chain: bool = False, detach_every: int | None = None, causal: bool = True):
        """Run one block.

        ``x`` is ``[B, L, P, d]``, ``cond`` the per-frame conditioning
        ``[B, L, 1, d]`` and ``actions`` ``[B, L, A]``. In chained mode
        ``state`` is the initial state per token (``[B, P, ...]`` fields) and
        the returned states are stacked ``[B, L+1, P, ...]``; in seeded mode
        ``state`` holds one seed per window (``[B, L/window, P, ...]``) and the
        final state of each window is returned in the same layout.
        """
        b, length, p, d = x.shape
        gh, gw = self.cfg.grid
        base = self.cfg.rope_base
        layout = AttentionLayout(b, length, p, window)
        dh = d // self.heads

        rows = torch.arange(gh, dtype=x.dtype, device=x.device).repeat_interleave(gw)
        cols = torch.arange(gw, dtype=x.dtype, device=x.device).repeat(gh)
        h, gate = adaln_modulate(x, cond, self.spatial_mod)
        a = self._attend(layout.spatial(h), self.spatial_qkv, self.spatial_out,
                         lambda t: apply_rope_2d(t, rows, cols, base), None)
        x = x + gate * layout.spatial_inverse(a)

        pos = torch.arange(window, dtype=x.dtype, device=x.device)
        rope_t = RoPEParams(dh, base, "temporal")
        mask = causal_mask(window, x.device) if causal else None
        h, gate = adaln_modulate(x, cond, self.temporal_mod)
        a = self._attend(layout.temporal(h), self.temporal_qkv, self.temporal_out,
                         lambda t: apply_rope(t, pos, rope_t), mask)
        x = x + gate * layout.temporal_inverse(a)

        new_state = None
        if self.rnn is not None:
            h, gate = adaln_modulate(x, cond, self.rnn_mod)
            if self.action_proj is not None:
                h = concat_action(h, actions[:, :, None, :].to(h.dtype), self.action_proj)
            if chain:
                seq = h.permute(0, 2, 1, 3).reshape(b * p, length, -1)
                if state is not None:
                    state = map_state(state, lambda t: t.reshape(b * p, *t.shape[2:]))
                out, states = self.rnn.scan(seq, state, detach_every)
                out = out.reshape(b, p, length, d).permute(0, 2, 1, 3)
                new_state = map_state(states, lambda t: t.reshape(b, p, *t.shape[1:]).transpose(1, 2))
            else:
                if state is None:
                    raise StateError("seeded evaluation needs a recurrent state for every window")
                nw = layout.n_windows
                if state[0].shape[:3] != (b, nw, p):
                    raise StateError(
                        f"seed states shaped {tuple(state[0].shape[:3])}, expected {(b, nw, p)}"
                    )
                seeds = map_state(state, lambda t: t.reshape(b * nw * p, *t.shape[3:]))
                out, states = self.rnn.scan(layout.temporal(h), seeds)
                out = layout.temporal_inverse(out)
                last = index_state(states, -1)
                new_state = map_state(last, lambda t: t.reshape(b, nw, p, *t.shape[1:]))
            x = x + gate * out

        if self.cfg.feed_forward:
            h, gate = adaln_modulate(x, cond, self.ff_mod)
            x = x + gate * self.ff_out(F.gelu(self.ff_in(h)))
        return x, new_state


class RadModel(nn.Module):
    """Noise-prediction network ``eps_theta(z_[t], [t], a)``."""

    def __init__(self, cfg: RadConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.patch_embed = Linear(cfg.patch_dim, d)
        self.t_embed1 = Linear(d, d)
        self.t_embed2 = Linear(d, d)
        self.a_embed = Linear(cfg.action_dim, d)
        self.blocks = nn.ModuleList(RadBlock(cfg) for _ in range(cfg.layers))
        self.final_mod = adaln_head(d, 2)
        self.head = Linear(d, cfg.patch_dim, init="zeros")
        # optional event log: list of dicts appended by forward()
        self.events: list | None = None

    @property
    def has_memory(self) -> bool:
        return self.cfg.rnn != "none"

    def condition(self, timesteps: Tensor, actions: Tensor) -> Tensor:
        dtype = self.patch_embed.weight.dtype
        temb = timestep_embedding(timesteps, self.cfg.dim).to(dtype)
        temb = self.t_embed2(F.silu(self.t_embed1(temb)))
        return temb + self.a_embed(actions.to(dtype))

    def initial_states(self, batch: int, dtype=None, device=None):
        """Zero initial state for every layer, shaped ``[B, P, ...]`` per field."""
        p = self.cfg.tokens
        out = []
        for blk in self.blocks:
            if blk.rnn is None:
                out.append(None)
                continue
            s = blk.rnn.init_state(batch * p, dtype=dtype, device=device)
            out.append(map_state(s, lambda t: t.reshape(batch, p, *t.shape[1:])))
        return out

    def forward(self, frames: Tensor, timesteps: Tensor, actions: Tensor, window: int | None = None,
                states=None, chain: bool = False, detach_every: int | None = None,
                causal: bool = True):
        """Predict noise for ``frames`` ``[B, L, H, W, C]``.

        ``timesteps`` is ``[B, L]`` (0 marks a clean frame) and ``actions``
        ``[B, L, A]``. ``window`` defaults to the whole sequence. Returns the
        noise prediction and the per-layer states (see :class:`RadBlock`).
        """
        cfg = self.cfg
        b, length = frames.shape[:2]
        window = length if window is None else window
        if self.events is not None:
            self.events.append({
                "chain": chain, "window": window, "frames": length, "batch": b,
                "timesteps": timesteps.detach().cpu().clone(),
            })
        x = self.patch_embed(patchify(frames, cfg.patch))
        x = x.reshape(b, length, cfg.tokens, cfg.dim)
        c = F.silu(self.condition(timesteps, actions))
        cond = c[:, :, None, :]
        if states is None:
            if chain:
                states = [None] * len(self.blocks)
            elif self.has_memory:
                raise StateError("seeded evaluation needs per-layer seed states")
            else:
                states = [None] * len(self.blocks)
        out_states = []
        for blk, st in zip(self.blocks, states):
            x, st = blk(x, cond, actions, window, st, chain=chain, detach_every=detach_every, causal=causal)
            out_states.append(st)
        gamma, beta = self.final_mod(cond).split(cfg.dim, dim=-1)
        x = self.head(gamma * layer_norm(x) + beta)
        gh, gw = cfg.grid
        eps = unpatchify(x.reshape(b, length, gh, gw, cfg.patch_dim), cfg.patch, cfg.channels)
        return eps, out_states


class HiddenStateBank:
    """Recurrent states per layer and frame boundary.

    ``layers[d]`` is a state NamedTuple whose fields are ``[B, T+1, P, ...]``;
    index ``t`` holds the state after consuming frames ``0..t-1``, so index 0
    is the initial state. Layers without a recurrent block hold ``None``.
    """

    def __init__(self, layers: list):
        self.layers = list(layers)

    def __len__(self) -> int:
        for st in self.layers:
            if st is not None:
                return st[0].shape[1]
        return 0

    @property
    def frontier(self) -> int:
        """Number of frames consumed so far."""
        return len(self) - 1

    def at(self, index: int) -> list:
        return [None if st is None else index_state(st, index) for st in self.layers]

    def seeds(self, starts) -> list:
        """Gather seed states ``[B, nW, P, ...]`` for windows starting at ``starts``.

        ``starts`` is a sequence shared by the batch or a ``[B, nW]`` tensor.
        """
        out = []
        for st in self.layers:
            if st is None:
                out.append(None)
                continue
            b = st[0].shape[0]
            idx = torch.as_tensor(starts, dtype=torch.long)
            if idx.dim() == 1:
                idx = idx[None].expand(b, -1)
            rows = torch.arange(b)[:, None]
            out.append(map_state(st, lambda t: t[rows, idx]))
        return out

    def append(self, other: "HiddenStateBank") -> "HiddenStateBank":
        """Extend with the states of ``other`` after its initial entry."""
        layers = []
        for mine, new in zip(self.layers, other.layers):
            if mine is None:
                layers.append(None)
            else:
                layers.append(type(mine)(*[torch.cat((a, b[:, 1:]), dim=1) for a, b in zip(mine, new)]))
        return HiddenStateBank(layers)

    def detach(self) -> "HiddenStateBank":
        return HiddenStateBank([None if st is None else map_state(st, Tensor.detach) for st in self.layers])


def rad_forward(model: RadModel, noisy: Tensor, timesteps: Tensor, actions: Tensor, bank,
                window: int, starts=None) -> Tensor:
    """Predict noise for windows seeded from a state bank.

    ``noisy`` is ``[B, L, ...]`` tiled by windows of length ``window``; window
    ``w`` is seeded from bank index ``starts[w]`` (default ``w * window``).
    """
    length = noisy.shape[1]
    if length % window:
        raise ConfigError(f"window {window} does not tile {length} frames")
    nw = length // window
    if starts is None:
        starts = [w * window for w in range(nw)]
    seeds = bank.seeds(starts) if model.has_memory else None
    eps, _ = model(noisy, timesteps, actions, window, seeds)
    return eps


def randomize_parameters(model: nn.Module, seed: int = 0, scale: float = 0.5) -> nn.Module:
    """Overwrite every parameter with random values (for tests and probes).

    Zero-initialized gates and heads make a fresh model an identity map,
    which hides most of the computation from gradient and causality checks.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            fan_in = p.shape[0] if p.dim() > 1 else 1
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype)
                    * scale / max(1.0, fan_in ** 0.5))
    return model


_GROUPS = {
    "attention": ("spatial_qkv", "spatial_out", "temporal_qkv", "temporal_out"),
    "recurrent": ("rnn", "action_proj"),
    "conditioning": ("spatial_mod", "temporal_mod", "rnn_mod", "ff_mod", "t_embed1", "t_embed2",
                     "a_embed", "final_mod"),
    "feed_forward": ("ff_in", "ff_out"),
    "io": ("patch_embed", "head"),
}


def count_params(model: RadModel) -> dict[str, int]:
    """Parameter counts per component, by enumerating the module tree."""
    counts = {k: 0 for k in _GROUPS}
    for name, p in model.named_parameters():
        parts = name.split(".")
        for group, prefixes in _GROUPS.items():
            if any(part in prefixes for part in parts[:3]):
                counts[group] += p.numel()
                break
        else:
            raise KeyError(f"parameter {name} has no component")
    counts["total"] = sum(counts.values())
    return counts


def _lin(i: int, o: int) -> int:
    return i * o + o


def param_formula(cfg: RadConfig) -> dict[str, int]:
    """Closed-form parameter counts matching :func:`count_params`."""
    d, a = cfg.dim, cfg.action_dim
    per_attn = 2 * (_lin(d, 3 * d) + _lin(d, d))
    i = cfg.rnn_input_dim
    if cfg.rnn == "none":
        rnn = 0
    else:
        if cfg.rnn == "lstm":
            h = cfg.lstm_hidden or d
            rnn = 4 * (h * (i + h) + h) + _lin(h, d)
        elif cfg.rnn == "ssm":
            di, n, k = cfg.ssm_expand * d, cfg.ssm_state, cfg.ssm_conv
            rnn = _lin(i, di) + k * di + di + 3 * _lin(di, n) + _lin(di, di) + _lin(di, d)
        else:
            rnn = 3 * i * d + _lin(d, d)
        if cfg.action_into_rnn:
            rnn += _lin(a, cfg.action_rnn_dim)
    n_mods = 2 + (cfg.rnn != "none") + cfg.feed_forward
    cond = cfg.layers * n_mods * _lin(d, 3 * d) + 2 * _lin(d, d) + _lin(a, d) + _lin(d, 2 * d)
    ff = _lin(d, cfg.mlp_ratio * d) + _lin(cfg.mlp_ratio * d, d) if cfg.feed_forward else 0
    counts = {
        "attention": cfg.layers * per_attn,
        "recurrent": cfg.layers * rnn,
        "conditioning": cond,
        "feed_forward": cfg.layers * ff,
        "io": _lin(cfg.patch_dim, d) + _lin(d, cfg.patch_dim),
    }
    counts["total"] = sum(counts.values())
    return counts


# -- checkpoint container ---------------------------------------------------

MAGIC = b"RADM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_text(buf, text: str):
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_exact(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint")
    return raw


def _read_text(buf) -> str:
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    return _read_exact(buf, n).decode("utf-8")


def save_checkpoint(path, model: RadModel, meta: dict | None = None, extra: dict | None = None):
    """Write config, metadata and named float32 blobs; atomic via rename."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    _write_text(buf, model.cfg.to_text())
    _write_text(buf, "".join(f"{k}={v}\n" for k, v in (meta or {}).items()))
    blobs = [(n, p.detach()) for n, p in model.named_parameters()]
    blobs += list((extra or {}).items())
    buf.write(struct.pack("<I", len(blobs)))
    for name, t in blobs:
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Return ``(config, meta, blobs)`` with blobs as float32 tensors in file order."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a RADM checkpoint")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        cfg = RadConfig.from_text(_read_text(fh))
        meta = flatcfg.parse_flat(_read_text(fh))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        blobs = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, n).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4").reshape(shape)
            blobs[name] = torch.from_numpy(arr.astype(np.float32))
    return cfg, meta, blobs


def load_model(path) -> tuple[RadModel, dict, dict]:
    cfg, meta, blobs = read_checkpoint(path)
    model = RadModel(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in blobs:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            p.copy_(blobs.pop(name))
    return model, meta, blobs
