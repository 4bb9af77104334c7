"""Recurrent memory blocks: LSTM, selective SSM and TTT-linear.

Each block exposes the same contract: ``init_state(n)``, ``step(x, state)``
and ``scan(seq, state)``, where ``seq`` is ``[N, L, d_in]`` and every
state is a NamedTuple of tensors with leading batch axis ``N``. Outputs are
projected back to the model width so the blocks are interchangeable.

The bare per-step recurrences (:func:`lstm_step`, :func:`ssm_step`,
:func:`ttt_step`) are exposed as pure functions of explicit parameters.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .nn import ConfigError, Linear

RNN_TYPES = ("none", "lstm", "ssm", "ttt")


class LstmState(NamedTuple):
    c: Tensor  # [N, h]
    y: Tensor  # [N, h]


class SsmState(NamedTuple):
    h: Tensor  # [N, d_inner, n]
    conv: Tensor  # [N, kernel - 1, d_inner], last inputs of the causal conv


class TttState(NamedTuple):
    w: Tensor  # [N, heads, d_head, d_head]


def lstm_step(x: Tensor, state: LstmState, weight: Tensor, bias: Tensor) -> tuple[Tensor, LstmState]:
    """One LSTM step.

    ``weight`` is ``[h + d_in, 4h]`` acting on ``[y_prev; x]``; the four gate
    blocks are ordered forget, input, output, candidate.
    """
    pre = torch.cat((state.y, x), dim=-1) @ weight + bias
    f, i, o, g = pre.chunk(4, dim=-1)
    c = torch.sigmoid(f) * state.c + torch.sigmoid(i) * torch.tanh(g)
    y = torch.sigmoid(o) * torch.tanh(c)
    return y, LstmState(c, y)


def ssm_step(x: Tensor, h: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> tuple[Tensor, Tensor]:
    """Diagonal selective state-space recurrence.

    ``x`` is ``[N, d]``, ``h`` is ``[N, d, n]``; ``A``, ``B``, ``C`` are
    ``[N, n]`` and ``D`` is ``[N, d]``. Returns ``(y, h_new)`` with
    ``h_new = A * h + x B^T`` and ``y = h_new C + D * x``.
    """
    h = A[:, None, :] * h + x[:, :, None] * B[:, None, :]
    y = (h * C[:, None, :]).sum(-1) + D * x
    return y, h


def ttt_step(q: Tensor, k: Tensor, v: Tensor, w: Tensor, lr: float) -> tuple[Tensor, Tensor]:
    """One TTT-linear inner-loop update followed by the query read-out.

    ``q``, ``k``, ``v`` are the projected token ``[N, heads, d]`` and ``w`` the
    fast weights ``[N, heads, d, d]``. The inner loss is ``|w k - v|^2``.
    """
    pred = (w @ k[..., None])[..., 0]
    grad = 2.0 * (pred - v)[..., :, None] * k[..., None, :]
    w = w - lr * grad
    y = (w @ q[..., None])[..., 0]
    return y, w


def ttt_inner_loss(w: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return (((w @ k[..., None])[..., 0] - v) ** 2).sum((-1, -2))


def stack_states(states: list) -> NamedTuple:
    """Stack a list of per-step states along a new time axis 1."""
    cls = type(states[0])
    return cls(*[torch.stack(field, dim=1) for field in zip(*states)])


def index_state(state: NamedTuple, index) -> NamedTuple:
    """Select time ``index`` from a stacked state (time on axis 1)."""
    return type(state)(*[t[:, index] for t in state])


def map_state(state: NamedTuple, fn) -> NamedTuple:
    return type(state)(*[fn(t) for t in state])


class RecurrentBlock(nn.Module):
    """Shared scan machinery; subclasses define ``project``, ``cell`` and ``out``."""

    kind = "base"

    def project(self, seq: Tensor) -> tuple[Tensor, ...]:
        raise NotImplementedError

    def cell(self, feats: tuple[Tensor, ...], state):
        raise NotImplementedError

    def init_state(self, n: int, dtype=None, device=None):
        raise NotImplementedError

    def step(self, x: Tensor, state):
        feats = self.project(x[:, None])
        y, state = self.cell(tuple(f[:, 0] for f in feats), state)
        return self.out(y), state

    def scan(self, seq: Tensor, state=None, detach_every: int | None = None):
        """Fold ``cell`` over the time axis of ``seq`` ``[N, L, d_in]``.

        Returns outputs ``[N, L, d_model]`` and all states stacked on axis 1
        (``L + 1`` entries, the first being ``state``). With ``detach_every``
        the carried state is cut from the graph every that many steps.
        """
        n, length = seq.shape[:2]
        if length < 1:
            raise ValueError("scan needs at least one step")
        if state is None:
            state = self.init_state(n, dtype=seq.dtype, device=seq.device)
        # unbind once: per-step indexing would make backward quadratic in L
        steps = list(zip(*(f.unbind(1) for f in self.project(seq))))
        states = [state]
        ys = []
        for t in range(length):
            if detach_every and t and t % detach_every == 0:
                state = map_state(state, Tensor.detach)
            y, state = self.cell(steps[t], state)
            ys.append(y)
            states.append(state)
        return self.out(torch.stack(ys, dim=1)), stack_states(states)


class LSTMBlock(RecurrentBlock):
    kind = "lstm"

    def __init__(self, d_in: int, d_model: int, hidden: int):
        super().__init__()
        if hidden <= 0:
            raise ConfigError("LSTM hidden size must be positive")
        self.d_in, self.hidden = d_in, hidden
        self.weight = nn.Parameter(torch.randn(hidden + d_in, 4 * hidden) / math.sqrt(hidden + d_in))
        self.bias = nn.Parameter(torch.zeros(4 * hidden))
        self.out = Linear(hidden, d_model)

    def init_state(self, n, dtype=None, device=None):
        z = torch.zeros(n, self.hidden, dtype=dtype or self.weight.dtype, device=device)
        return LstmState(z, z.clone())

    def project(self, seq):
        # the input half of the gate pre-activation does not depend on the state
        return (seq @ self.weight[self.hidden:] + self.bias,)

    def cell(self, feats, state):
        pre = state.y @ self.weight[: self.hidden] + feats[0]
        f, i, o, g = pre.chunk(4, dim=-1)
        c = torch.sigmoid(f) * state.c + torch.sigmoid(i) * torch.tanh(g)
        y = torch.sigmoid(o) * torch.tanh(c)
        return y, LstmState(c, y)


class SSMBlock(RecurrentBlock):
    """Mamba-style selective SSM with a diagonal input-dependent transition.

    ``A_t = exp(-softplus(a(u_t)))`` keeps every transition entry in (0, 1).
    """

    kind = "ssm"

    def __init__(self, d_in: int, d_model: int, state_dim: int, conv_kernel: int = 4, expand: int = 2):
        super().__init__()
        if conv_kernel < 1 or state_dim < 1 or expand < 1:
            raise ConfigError("invalid SSM sizes")
        self.d_inner = expand * d_model
        self.state_dim = state_dim
        self.kernel = conv_kernel
        self.in_proj = Linear(d_in, self.d_inner)
        self.conv_weight = nn.Parameter(torch.randn(conv_kernel, self.d_inner) / math.sqrt(conv_kernel))
        self.conv_bias = nn.Parameter(torch.zeros(self.d_inner))
        self.a_proj = Linear(self.d_inner, state_dim)
        self.b_proj = Linear(self.d_inner, state_dim)
        self.c_proj = Linear(self.d_inner, state_dim)
        self.d_proj = Linear(self.d_inner, self.d_inner)
        self.out = Linear(self.d_inner, d_model)

    def init_state(self, n, dtype=None, device=None):
        dtype = dtype or self.conv_weight.dtype
        h = torch.zeros(n, self.d_inner, self.state_dim, dtype=dtype, device=device)
        conv = torch.zeros(n, self.kernel - 1, self.d_inner, dtype=dtype, device=device)
        return SsmState(h, conv)

    def project(self, seq):
        return (self.in_proj(seq),)

    def cell(self, feats, state):
        x = feats[0]
        window = torch.cat((state.conv, x[:, None]), dim=1)  # [N, k, d_inner]
        u = F.silu((window * self.conv_weight).sum(1) + self.conv_bias)
        A = torch.exp(-F.softplus(self.a_proj(u)))
        y, h = ssm_step(u, state.h, A, self.b_proj(u), self.c_proj(u), self.d_proj(u))
        return y, SsmState(h, window[:, 1:])


class TTTBlock(RecurrentBlock):
    """TTT-linear: per-token fast weights trained online on a reconstruction loss."""

    kind = "ttt"

    def __init__(self, d_in: int, d_model: int, heads: int = 2, inner_lr: float | None = None):
        super().__init__()
        if d_model % heads:
            raise ConfigError("TTT width must be divisible by heads")
        self.heads = heads
        self.d_head = d_model // heads
        self.inner_lr = 0.5 / self.d_head if inner_lr is None else inner_lr
        if self.inner_lr < 0:
            raise ConfigError("TTT inner learning rate must be non-negative")
        self.theta_q = Linear(d_in, d_model, bias=False)
        self.theta_k = Linear(d_in, d_model, bias=False)
        self.theta_v = Linear(d_in, d_model, bias=False)
        self.out = Linear(d_model, d_model)

    def init_state(self, n, dtype=None, device=None):
        dtype = dtype or self.theta_q.weight.dtype
        return TttState(torch.zeros(n, self.heads, self.d_head, self.d_head, dtype=dtype, device=device))

    def _heads(self, x):
        return x.reshape(*x.shape[:-1], self.heads, self.d_head)

    def project(self, seq):
        return tuple(self._heads(p(seq)) for p in (self.theta_q, self.theta_k, self.theta_v))

    def cell(self, feats, state):
        q, k, v = feats
        y, w = ttt_step(q, k, v, state.w, self.inner_lr)
        return y.flatten(-2), TttState(w)


def build_block(kind: str, d_in: int, d_model: int, *, lstm_hidden: int = 0, ssm_state: int = 16,
                ssm_conv: int = 4, ssm_expand: int = 2, ttt_heads: int = 2,
                ttt_lr: float | None = None) -> RecurrentBlock | None:
    if kind == "none":
        return None
    if kind == "lstm":
        return LSTMBlock(d_in, d_model, lstm_hidden or d_model)
    if kind == "ssm":
        return SSMBlock(d_in, d_model, ssm_state, ssm_conv, ssm_expand)
    if kind == "ttt":
        return TTTBlock(d_in, d_model, ttt_heads, ttt_lr)
    raise ConfigError(f"unknown rnn type {kind!r}; expected one of {RNN_TYPES}")


def recurrent_scan(block: RecurrentBlock, seq: Tensor, state=None, detach_every: int | None = None):
    """Sequential fold of ``block`` over ``seq`` (``[L, d]`` or ``[N, L, d]``)."""
    unbatched = seq.dim() == 2
    if unbatched:
        seq = seq[None]
        if state is not None:
            state = map_state(state, lambda t: t[None])
    out, states = block.scan(seq, state, detach_every)
    if unbatched:
        return out[0], map_state(states, lambda t: t[0])
    return out, states


def concat_action(attn_out: Tensor, action: Tensor, proj: Linear) -> Tensor:
    """Append ``proj(action)`` to every token of ``attn_out`` along features.

    ``action`` must broadcast against ``attn_out`` on every leading axis.
    """
    if action.shape[-1] != proj.d_in:
        raise ConfigError(f"action width {action.shape[-1]} != projection input {proj.d_in}")
    a = proj(action)
    a = a.expand(*attn_out.shape[:-1], a.shape[-1])
    return torch.cat((attn_out, a), dim=-1)
