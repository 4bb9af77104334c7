import csv
import warnings

import numpy as np
import pytest
import torch
from conftest import random_video, tiny_model
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import naive_framewise_loss

from rad.diffusion import build_schedule, sample_timesteps
from rad.model import RadModel, load_model
from rad.nn import ConfigError
from rad.training import (
    TrainConfig,
    WindowSpec,
    chunk_plan,
    chunkwise_errors,
    framewise_errors,
    framewise_train_step,
    gather_windows,
    optimize,
    rng,
    sample_starts,
)
from conftest import tiny_config


def _noise(b, n, lw, cfg, seed=0):
    gen = torch.Generator().manual_seed(seed)
    t = sample_timesteps((b, n * lw), 50, gen)
    eps = torch.randn(b, n * lw, cfg.height, cfg.width, cfg.channels, generator=gen, dtype=torch.float64)
    return t, eps


@pytest.mark.parametrize("rnn", ["lstm", "ssm", "ttt", "none"])
def test_prefetch_matches_sequential_oracle(rnn):
    model = tiny_model(rnn=rnn, loss_window=3)
    x, a = random_video(2, 8, model.cfg)
    starts = torch.tensor([[0, 2, 5], [4, 1, 3]])
    t, eps = _noise(2, 3, 3, model.cfg)
    sched = build_schedule(50)
    fast = framewise_train_step(model, x, a, sched, TrainConfig(), starts=starts, noise=(t, eps))
    slow = naive_framewise_loss(model, x, a, sched, starts, t, eps)
    assert abs(fast.item() - slow.item()) < 1e-10


def test_rng_streams_are_independent_and_reproducible():
    a = torch.rand(4, generator=rng(0, "noise", 3))
    assert torch.equal(a, torch.rand(4, generator=rng(0, "noise", 3)))
    assert not torch.equal(a, torch.rand(4, generator=rng(0, "noise", 4)))
    assert not torch.equal(a, torch.rand(4, generator=rng(0, "timesteps", 3)))
    assert not torch.equal(a, torch.rand(4, generator=rng(1, "noise", 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(4, 20), st.integers(1, 4), st.integers(1, 30), st.integers(0, 999))
def test_sample_starts(b, length, lw, n, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        starts = sample_starts(b, length, lw, n, torch.Generator().manual_seed(seed))
    n_max = length - lw + 1
    assert starts.shape == (b, min(n, n_max))
    assert starts.min() >= 0 and starts.max() <= length - lw
    for row in starts.tolist():
        assert len(set(row)) == len(row)


def test_sample_starts_warns_and_rejects():
    with pytest.warns(UserWarning):
        sample_starts(1, 5, 3, 10, torch.Generator())
    with pytest.raises(ConfigError):
        sample_starts(1, 2, 3, 1, torch.Generator())


def test_gather_windows():
    x = torch.arange(2 * 6).reshape(2, 6)
    out = gather_windows(x, torch.tensor([[0, 3], [2, 1]]), 2)
    assert out.tolist() == [[0, 1, 3, 4], [8, 9, 7, 8]]


def test_chunk_plan():
    assert chunk_plan(9, 3) == [(0, 3, 0), (3, 6, 3), (6, 9, 6)]
    assert chunk_plan(7, 3) == [(0, 3, 0), (3, 6, 3), (6, 7, 6)]
    assert chunk_plan(9, 3, start=4) == [(4, 7, 4), (7, 9, 7)]


def test_window_spec():
    assert WindowSpec("chunkwise", 4, 4).stride == 4
    assert WindowSpec("framewise", 4, 3).stride == 1
    with pytest.raises(ConfigError):
        WindowSpec("chunkwise", 4, 4, stride=2)
    with pytest.raises(ConfigError):
        WindowSpec("framewise", 4, 4, stride=2)


@pytest.mark.parametrize("mode", ["framewise", "chunkwise"])
def test_clean_memory_bank_ignores_noise(mode):
    model = tiny_model(rnn="lstm", mode=mode)
    x, a = random_video(2, 6, model.cfg)
    sched = build_schedule(50)
    model.events = []
    for step in range(5):
        if mode == "framewise":
            framewise_errors(model, x, a, sched, TrainConfig(), step=step)
        else:
            chunkwise_errors(model, x, a, sched, TrainConfig(), step=step)
    chained = [e for e in model.events if e["chain"]]
    assert chained and all(int(e["timesteps"].abs().max()) == 0 for e in chained)

    model.events = []
    chunkwise_errors(model, x, a, sched, TrainConfig(clean_memory=False), step=0)
    assert any(int(e["timesteps"].max()) > 0 for e in model.events if e["chain"])


def test_framewise_banks_identical_across_noise_redraws():
    model = tiny_model(rnn="ssm")
    x, a = random_video(2, 7, model.cfg)
    sched = build_schedule(50)
    banks = [framewise_errors(model, x, a, sched, TrainConfig(), step=s)[3] for s in range(5)]
    for other in banks[1:]:
        for ref, new in zip(banks[0].layers, other.layers):
            for f_ref, f_new in zip(ref, new):
                assert torch.equal(f_ref, f_new)
    noisy = [framewise_errors(model, x, a, sched, TrainConfig(clean_memory=False), step=s)[3] for s in range(5)]
    assert any(not torch.equal(noisy[0].layers[0][0], b.layers[0][0]) for b in noisy[1:])


def test_chunk_batches_do_not_change_the_loss():
    model = tiny_model(rnn="ttt", mode="chunkwise")
    x, a = random_video(2, 8, model.cfg)
    sched = build_schedule(50)
    ref, _ = chunkwise_errors(model, x, a, sched, TrainConfig(chunk_batches=1), step=2)
    for k in (2, 3, 9):
        err, _ = chunkwise_errors(model, x, a, sched, TrainConfig(chunk_batches=k), step=2)
        assert torch.allclose(err, ref, atol=1e-12)


def test_chunkwise_padding_frames_are_excluded():
    model = tiny_model(rnn="lstm", mode="chunkwise")
    x, a = random_video(1, 7, model.cfg)
    trace = []
    err, t = chunkwise_errors(model, x, a, build_schedule(50), TrainConfig(), trace=trace)
    assert err.shape == (1, 7) and (t > 0).all()
    assert trace == chunk_plan(9, 3)


def _dataset(cfg, n=6, length=8):
    x, a = random_video(n, length, cfg, dtype=torch.float32)
    return x.numpy(), a.numpy()


def test_optimize_resume_is_exact(tmp_path):
    cfg = tiny_config(rnn="lstm", loss_window=3)
    data = _dataset(cfg)
    tc = TrainConfig(lr=1e-3, batch_size=2, steps=6, checkpoint_every=3)
    torch.manual_seed(0)
    full = RadModel(cfg)
    optimize(full, data, tc, tmp_path / "full")

    torch.manual_seed(0)
    part = RadModel(cfg)
    from dataclasses import replace
    optimize(part, data, replace(tc, steps=3), tmp_path / "part")
    resumed = RadModel(cfg)
    optimize(resumed, data, tc, tmp_path / "part", resume=True)
    for p1, p2 in zip(full.parameters(), resumed.parameters()):
        assert torch.equal(p1, p2)
    with open(tmp_path / "part" / "loss.csv") as fh:
        steps = [int(r["step"]) for r in csv.DictReader(fh)]
    assert steps == [1, 2, 3, 4, 5, 6]
    loaded, meta, _ = load_model(tmp_path / "full" / "step_000006.radm")
    assert int(meta["step"]) == 6
    assert (tmp_path / "full" / "step_000000.radm").exists()


def test_optimize_reduces_loss(tmp_path):
    cfg = tiny_config(rnn="none", dim=48, heads=2, patch=4, loss_window=3)
    data = _dataset(cfg, n=4)
    torch.manual_seed(0)
    model = RadModel(cfg)
    hist = optimize(model, data, TrainConfig(lr=3e-3, batch_size=4, steps=60, checkpoint_every=0), tmp_path)
    first = np.mean([r["loss"] for r in hist[:10]])
    last = np.mean([r["loss"] for r in hist[-10:]])
    assert last < first
