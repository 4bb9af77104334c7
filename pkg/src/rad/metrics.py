"""PSNR/SSIM, per-frame metric curves and resource benchmarks.

Metric functions take pixel arrays already mapped to ``[0, 1]``; use
:func:`to_unit` for model-space frames in ``[-1, 1]``.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .model import RadConfig, RadModel, count_params

C1 = 0.01 ** 2
C2 = 0.03 ** 2


def to_unit(frames) -> np.ndarray:
    if isinstance(frames, Tensor):
        frames = frames.detach().cpu().numpy()
    return (np.asarray(frames, dtype=np.float64) + 1.0) / 2.0


def _check(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return pred, truth


def psnr(pred, truth) -> float:
    """``10 log10(1 / MSE)`` over the whole array; ``inf`` when identical."""
    pred, truth = _check(pred, truth)
    mse = float(np.mean((pred - truth) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_window(h: int, w: int):
    side = min(h, w)
    if side >= 11:
        return gaussian_window(11, 1.5)
    size = min(side, 7)
    if size < 3:
        return None
    return np.full((size, size), 1.0 / size ** 2)


def _filter(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Valid-mode weighted local mean over ``[H, W]``."""
    views = np.lib.stride_tricks.sliding_window_view(x, win.shape)
    return np.einsum("ijkl,kl->ij", views, win)


def _ssim_channel(x: np.ndarray, y: np.ndarray, win) -> float:
    if win is None:
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cov = ((x - mx) * (y - my)).mean()
        return float(((2 * mx * my + C1) * (2 * cov + C2)) / ((mx ** 2 + my ** 2 + C1) * (vx + vy + C2)))
    mx, my = _filter(x, win), _filter(y, win)
    vx = _filter(x * x, win) - mx ** 2
    vy = _filter(y * y, win) - my ** 2
    cov = _filter(x * y, win) - mx * my
    s = ((2 * mx * my + C1) * (2 * cov + C2)) / ((mx ** 2 + my ** 2 + C1) * (vx + vy + C2))
    return float(s.mean())


def ssim(pred, truth) -> float:
    """Mean windowed SSIM of one frame ``[H, W]`` or ``[H, W, C]``, channel-averaged.

    An 11x11 Gaussian window (sigma 1.5) is used when the frame allows it,
    otherwise a uniform window of ``min(H, W, 7)``; below 3 pixels the
    global image statistics are used. Local (co)variances are population
    estimates and only fully covered window positions are averaged.
    """
    pred, truth = _check(pred, truth)
    if pred.ndim == 2:
        pred, truth = pred[..., None], truth[..., None]
    if pred.ndim != 3:
        raise ValueError("ssim expects a single frame")
    win = _ssim_window(*pred.shape[:2])
    return float(np.mean([_ssim_channel(pred[..., c], truth[..., c], win) for c in range(pred.shape[-1])]))


@dataclass
class MetricReport:
    """Per-frame metrics of one episode; ``mask`` marks the evaluated target frames."""

    episode: int
    psnr_frames: np.ndarray
    ssim_frames: np.ndarray
    mask: np.ndarray
    lpips: float | None = None  # reserved, never computed

    @property
    def frames(self) -> int:
        return int(self.mask.sum())

    @property
    def psnr(self) -> float:
        """PSNR of the mean squared error pooled over the target frames."""
        vals = self.psnr_frames[self.mask]
        if np.isinf(vals).all():
            return math.inf
        mse = np.mean(10.0 ** (-vals / 10.0))
        return 10.0 * math.log10(1.0 / mse)

    @property
    def ssim(self) -> float:
        return float(np.mean(self.ssim_frames[self.mask]))


def evaluate_episode(pred, truth, context: int, episode: int = 0) -> MetricReport:
    """Per-frame PSNR/SSIM of ``[L, H, W, C]`` frames in ``[-1, 1]``; frames ``>= context`` are targets."""
    p, t = to_unit(pred), to_unit(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    length = p.shape[0]
    ps = np.array([psnr(p[i], t[i]) for i in range(length)])
    ss = np.array([ssim(p[i], t[i]) for i in range(length)])
    mask = np.arange(length) >= context
    return MetricReport(episode, ps, ss, mask)


def _mean_std(vals: np.ndarray) -> tuple[float, float]:
    inf = np.isinf(vals)
    if inf.all():
        return math.inf, 0.0
    if inf.any():
        return math.inf, math.nan
    return float(vals.mean()), float(vals.std())


CURVE_COLUMNS = ("frame_idx", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std")


def per_frame_curves(reports: list[MetricReport], path=None) -> list[dict]:
    """Mean and population std of PSNR/SSIM per frame index across episodes.

    Episodes of different length are aligned at frame 0; each index averages
    over the episodes that reach it. Optionally writes the rows as CSV.
    """
    if not reports:
        raise ValueError("no reports")
    length = max(len(r.psnr_frames) for r in reports)
    rows = []
    for i in range(length):
        ps = np.array([r.psnr_frames[i] for r in reports if i < len(r.psnr_frames)])
        ss = np.array([r.ssim_frames[i] for r in reports if i < len(r.ssim_frames)])
        pm, pd = _mean_std(ps)
        rows.append({"frame_idx": i, "psnr_mean": pm, "psnr_std": pd,
                     "ssim_mean": float(ss.mean()), "ssim_std": float(ss.std())})
    if path is not None:
        write_csv(path, CURVE_COLUMNS, rows)
    return rows


def boundary_drop(rows: list[dict], index: int, key: str = "ssim_mean") -> float:
    """Decrease of a curve from frame ``index - 1`` to ``index``."""
    return rows[index - 1][key] - rows[index][key]


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def write_eval_csv(path, reports: list[MetricReport]):
    rows = [{"episode": r.episode, "frames": r.frames, "psnr": r.psnr, "ssim": r.ssim} for r in reports]
    write_csv(path, ("episode", "frames", "psnr", "ssim"), rows)


# -- resource benchmarks ----------------------------------------------------

BENCH_COLUMNS = ("rnn", "seconds_per_step", "peak_mem_mb", "params")


class _SavedBytes:
    """Counts bytes of tensors saved for backward during one step.

    Everything saved stays alive until the backward pass starts, so the sum
    is the activation high-water mark of the step (storage sharing aside).
    """

    def __init__(self):
        self.peak = 0

    def pack(self, t: Tensor):
        self.peak += t.numel() * t.element_size()
        return t

    def unpack(self, t):
        return t


def _step_fn(model: RadModel, frames, actions, cfg, schedule):
    from .training import make_optimizer, train_step

    opt = make_optimizer(model, cfg)

    def step(i):
        loss = train_step(model, frames, actions, schedule, cfg, i)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    return step


def time_steps(fn, steps: int = 10, warmup: int = 2) -> float:
    """Median wall time of ``fn(i)`` over ``steps`` calls after ``warmup`` untimed ones."""
    for i in range(warmup):
        fn(i)
    times = []
    for i in range(steps):
        t0 = time.perf_counter()
        fn(warmup + i)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_resources(base: RadConfig, rnn_types=("none", "lstm", "ssm", "ttt"), seq_len: int = 32,
                    batch: int = 2, steps: int = 10, warmup: int = 2, train=None, seed: int = 0) -> list[dict]:
    """One row per recurrent block type: median seconds per train step, peak memory, RNN params.

    Peak memory is the high-water mark of activations saved for backward
    plus parameters, gradients and Adam moments. ``params`` counts the
    recurrent block only. A failing configuration (for example out of
    memory) is reported with ``nan`` entries and an ``error`` field.
    """
    from dataclasses import replace

    from .diffusion import build_schedule
    from .training import TrainConfig

    train = train or TrainConfig(batch_size=batch, seed=seed)
    rows = []
    for rnn in rnn_types:
        cfg = replace(base, rnn=rnn)
        try:
            torch.manual_seed(seed)
            model = RadModel(cfg)
            gen = torch.Generator().manual_seed(seed)
            frames = torch.rand(batch, seq_len, cfg.height, cfg.width, cfg.channels, generator=gen) * 2 - 1
            actions = torch.nn.functional.one_hot(
                torch.randint(0, cfg.action_dim, (batch, seq_len), generator=gen), cfg.action_dim).float()
            schedule = build_schedule(cfg.diffusion_steps)
            fn = _step_fn(model, frames, actions, train, schedule)
            secs = time_steps(fn, steps, warmup)
            tracker = _SavedBytes()
            with torch.autograd.graph.saved_tensors_hooks(tracker.pack, tracker.unpack):
                fn(steps + warmup)
            n_params = count_params(model)
            static = 4 * n_params["total"] * 4  # weights, grads, two Adam moments
            rows.append({"rnn": rnn, "seconds_per_step": secs, "peak_mem_mb": (tracker.peak + static) / 2 ** 20,
                         "params": n_params["recurrent"]})
        except (RuntimeError, MemoryError) as exc:
            rows.append({"rnn": rnn, "seconds_per_step": math.nan, "peak_mem_mb": math.nan, "params": 0,
                         "error": str(exc)})
    return rows


def scan_scaling(kind: str, lengths=(128, 256), n: int = 16, d: int = 32, repeats: int = 15, seed: int = 0,
                 **block_kw) -> tuple[dict[int, float], dict[int, float]]:
    """Median wall time of one recurrent scan per sequence length (no grad).

    Lengths are timed in interleaved rounds so that load drift on a shared
    machine hits all of them alike. Returns ``(seconds, ratios)`` where
    ``ratios[L]`` is the median over rounds of ``time(L) / time(previous L)``.
    """
    from .memory import build_block

    torch.manual_seed(seed)
    block = build_block(kind, d, d, lstm_hidden=block_kw.pop("lstm_hidden", d), **block_kw)
    seqs = {length: torch.randn(n, length, d) for length in lengths}
    rounds = []
    with torch.no_grad():
        for i in range(2 + repeats):
            times = {}
            for length in lengths:
                t0 = time.perf_counter()
                block.scan(seqs[length])
                times[length] = time.perf_counter() - t0
            if i >= 2:  # warmup rounds
                rounds.append(times)
    seconds = {length: statistics.median(r[length] for r in rounds) for length in lengths}
    ratios = {b: statistics.median(r[b] / r[a] for r in rounds) for a, b in zip(lengths, lengths[1:])}
    return seconds, ratios


SCALING_COLUMNS = ("rnn", "seq_len", "seconds", "ratio")


def scaling_table(rnn_types=("lstm", "ssm", "ttt"), lengths=(128, 256), **kw) -> list[dict]:
    """Scan time per length and its paired ratio to the previous length, per block type."""
    rows = []
    for kind in rnn_types:
        if kind == "none":
            continue
        times, ratios = scan_scaling(kind, lengths, **kw)
        for length in lengths:
            rows.append({"rnn": kind, "seq_len": length, "seconds": times[length],
                         "ratio": ratios.get(length, math.nan)})
    return rows
