import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rad.nn import (
    AttentionLayout,
    ConfigError,
    Linear,
    RoPEParams,
    adaln_modulate,
    apply_rope,
    apply_rope_2d,
    causal_mask,
    grad_check,
    layer_norm,
    linear,
    softmax_attention,
)


def randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def naive_attention(q, k, v, mask=None):
    d = q.shape[-1]
    out = torch.zeros(q.shape[:-1] + (v.shape[-1],), dtype=q.dtype)
    for i in range(q.shape[-2]):
        allowed = [j for j in range(k.shape[-2]) if mask is None or mask[i, j]]
        if not allowed:
            continue
        logits = torch.stack([(q[..., i, :] * k[..., j, :]).sum(-1) / math.sqrt(d) for j in allowed], -1)
        w = torch.softmax(logits, -1)
        out[..., i, :] = sum(w[..., n, None] * v[..., j, :] for n, j in enumerate(allowed))
    return out


def test_linear_shapes_and_errors():
    x = randn(4, 3)
    w = randn(3, 5, seed=1)
    assert linear(x, w).shape == (4, 5)
    with pytest.raises(ConfigError):
        linear(x, randn(4, 5))
    lin = Linear(3, 2, init="zeros")
    assert torch.count_nonzero(lin.weight) == 0


def test_layer_norm_moments():
    y = layer_norm(randn(5, 16) * 3 + 2)
    assert torch.allclose(y.mean(-1), torch.zeros(5, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(y.var(-1, unbiased=False), torch.ones(5, dtype=torch.float64), atol=1e-4)


def test_attention_matches_naive():
    q, k, v = randn(2, 5, 4), randn(2, 5, 4, seed=1), randn(2, 5, 3, seed=2)
    mask = causal_mask(5)
    assert torch.allclose(softmax_attention(q, k, v, mask), naive_attention(q, k, v, mask), atol=1e-12)
    assert torch.allclose(softmax_attention(q, k, v), naive_attention(q, k, v), atol=1e-12)


def test_attention_rows_sum_to_one_with_large_logits():
    q = randn(1, 4, 2) * 1e3
    k = randn(1, 4, 2, seed=1) * 1e3
    v = torch.ones(1, 4, 1, dtype=torch.float64)
    out = softmax_attention(q, k, v, causal_mask(4))
    assert torch.isfinite(out).all()
    assert torch.allclose(out, torch.ones_like(out))


def test_fully_masked_row_is_zero_and_finite():
    q, k, v = randn(3, 2), randn(3, 2, seed=1), randn(3, 2, seed=2)
    mask = torch.tensor([[False, False, False], [True, False, False], [True, True, True]])
    out = softmax_attention(q, k, v, mask)
    assert torch.isfinite(out).all()
    assert torch.equal(out[0], torch.zeros(2, dtype=torch.float64))


def test_causal_attention_ignores_future():
    q, k, v = randn(6, 4), randn(6, 4, seed=1), randn(6, 4, seed=2)
    base = softmax_attention(q, k, v, causal_mask(6))
    k2, v2 = k.clone(), v.clone()
    k2[4:] += 5.0
    v2[4:] -= 3.0
    out = softmax_attention(q, k2, v2, causal_mask(6))
    assert torch.equal(out[:4], base[:4])


def test_rope_position_zero_is_identity():
    x = randn(3, 8)
    out = apply_rope(x, torch.zeros(3), RoPEParams(8))
    assert torch.equal(out, x)


def test_rope_odd_dim_rejected():
    with pytest.raises(ConfigError):
        RoPEParams(5)
    with pytest.raises(ConfigError):
        apply_rope_2d(randn(2, 6), torch.zeros(2), torch.zeros(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(-50, 50), st.integers(-50, 50), st.integers(-20, 20), st.integers(0, 10_000))
def test_rope_scores_depend_only_on_offset(m, n, shift, seed):
    q = randn(1, 8, seed=seed)
    k = randn(1, 8, seed=seed + 1)
    p = RoPEParams(8)

    def score(a, b):
        qa = apply_rope(q, torch.tensor([float(a)]), p)
        kb = apply_rope(k, torch.tensor([float(b)]), p)
        return float((qa * kb).sum())

    assert math.isclose(score(m, n), score(m + shift, n + shift), rel_tol=1e-9, abs_tol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-100, 100))
def test_rope_preserves_norm(seed, pos):
    x = randn(1, 16, seed=seed)
    y = apply_rope(x, torch.tensor([pos]), RoPEParams(16))
    assert torch.allclose(x.norm(), y.norm(), rtol=1e-12)


def test_adaln_identity_condition_and_width_check():
    x = randn(2, 4, 8)
    d = 8

    def head(c):
        out = torch.zeros(c.shape[:-1] + (3 * d,), dtype=c.dtype)
        out[..., :d] = 1.0
        return out

    y, gate = adaln_modulate(x, torch.zeros(2, 1, 8, dtype=torch.float64), head)
    assert torch.allclose(y, layer_norm(x))
    assert torch.count_nonzero(gate) == 0
    with pytest.raises(ConfigError):
        adaln_modulate(x, torch.zeros(2, 1, 8), lambda c: torch.zeros(2, 1, 8))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.sampled_from([(4, 1), (4, 2), (4, 4), (6, 3)]), st.integers(1, 5))
def test_layout_round_trip(b, frames_window, p):
    frames, window = frames_window
    x = randn(b, frames, p, 4)
    lay = AttentionLayout(b, frames, p, window)
    assert torch.equal(lay.spatial_inverse(lay.spatial(x)), x)
    t = lay.temporal(x)
    assert t.shape == (b * (frames // window) * p, window, 4)
    assert torch.equal(lay.temporal_inverse(t), x)
    # a temporal group is one token across consecutive frames of one window
    assert torch.equal(t[0], x[0, :window, 0])


def test_layout_rejects_non_tiling_window():
    with pytest.raises(ConfigError):
        AttentionLayout(1, 5, 2, 2)


def test_grad_check_rejects_bad_eps_and_detects_wrong_gradient():
    with pytest.raises(ValueError):
        grad_check(lambda x: x ** 2, randn(3), eps=1e-2)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2 x g

    assert grad_check(Wrong.apply, randn(4) + 3.0) > 0.1


@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients(seed):
    q, k, v = randn(2, 4, 8, seed=seed), randn(2, 4, 8, seed=seed + 10), randn(2, 4, 8, seed=seed + 20)
    mask = causal_mask(4)
    assert grad_check(lambda a, b, c: softmax_attention(a, b, c, mask), [q, k, v]) < 1e-4
    pos = torch.arange(4, dtype=torch.float64)
    assert grad_check(lambda x: apply_rope(x, pos, RoPEParams(8)), q) < 1e-4
    w = randn(8, 24, seed=seed + 30)
    assert grad_check(lambda x, c, w: adaln_modulate(x, c, lambda z: z @ w)[0], [q, randn(2, 1, 8, seed=seed), w]) < 1e-4
