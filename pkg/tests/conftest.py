import os
import sys

import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from rad.model import RadConfig, RadModel, randomize_parameters  # noqa: E402

torch.set_num_threads(int(os.environ.get("RAD_THREADS", "1")))


def tiny_config(**kw) -> RadConfig:
    base = dict(layers=2, dim=16, heads=2, patch=4, height=8, width=8, channels=3,
                window=3, loss_window=3, rnn="lstm", action_rnn_dim=4, mlp_ratio=2,
                ssm_state=4, ssm_conv=2, ssm_expand=1, lstm_hidden=8)
    base.update(kw)
    return RadConfig(**base)


def tiny_model(dtype=torch.float64, seed=0, **kw) -> RadModel:
    torch.manual_seed(seed)
    model = RadModel(tiny_config(**kw)).to(dtype)
    return randomize_parameters(model, seed=seed)


def random_video(b, length, cfg, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    frames = (torch.rand(b, length, cfg.height, cfg.width, cfg.channels, generator=gen, dtype=torch.float64) * 2 - 1)
    acts = torch.nn.functional.one_hot(torch.randint(0, cfg.action_dim, (b, length), generator=gen),
                                       cfg.action_dim)
    return frames.to(dtype), acts.to(dtype)


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
