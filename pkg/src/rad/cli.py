"""Command-line entry point: ``rad {gen-data,train,sample,eval,bench}``.

Run settings come from an optional flat ``key=value`` file (``--config``)
with ``--set key=value`` and dedicated flags layered on top. Keys are the
fields of :class:`RadConfig`, :class:`TrainConfig` and :class:`RunConfig`;
anything else is rejected. Exit codes: 0 success, 1 runtime failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as flatcfg
from .config import ConfigFileError
from .benchmark import evaluate_model
from .inference import rollout, split_context
from .mazeworld import MazeSpec, generate_dataset, read_dataset, write_dataset
from .metrics import (
    BENCH_COLUMNS,
    SCALING_COLUMNS,
    bench_resources,
    evaluate_episode,
    per_frame_curves,
    scaling_table,
    write_csv,
    write_eval_csv,
)
from .model import RadConfig, RadModel, load_model
from .nn import ConfigError
from .training import TrainConfig, WindowSpec, optimize, rng

log = logging.getLogger("rad")


@dataclasses.dataclass
class RunConfig:
    data: str = ""
    out: str = ""
    stride: int = 0  # 0 picks the mode's natural stride
    causal: bool = True


_SECTIONS = (RadConfig, TrainConfig, RunConfig)


class UsageError(Exception):
    pass


def resolve(text: str = "", overrides: dict | None = None):
    """Merge a config file body and overrides into ``(RadConfig, TrainConfig, RunConfig)``."""
    values = flatcfg.parse_flat(text) if text else {}
    values.update(overrides or {})
    known = {}
    for cls in _SECTIONS:
        known.update({k: cls for k in flatcfg.field_types(cls)})
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigFileError(f"unknown config keys: {unknown}")
    parts = []
    for cls in _SECTIONS:
        mine = {k: v for k, v in values.items() if known[k] is cls}
        parts.append(flatcfg.from_flat(cls, mine))
    model_cfg, train_cfg, run_cfg = parts
    WindowSpec(model_cfg.mode, model_cfg.window, model_cfg.loss_window, run_cfg.stride, run_cfg.causal)
    return model_cfg, train_cfg, run_cfg


def resolved_text(*cfgs) -> str:
    return "".join(flatcfg.to_flat(c) for c in cfgs)


def _onoff(value: str) -> str:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return "true" if value == "on" else "false"


def _csv_list(kind):
    def parse(value: str):
        try:
            return [kind(v) for v in value.split(",") if v]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _overrides(args, mapping: dict) -> dict:
    out = {}
    for pair in args.set or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    for attr, key in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = str(v)
    return out


def _load_data(path):
    episodes = read_dataset(path)
    if not episodes:
        raise ConfigError(f"{path} holds no episodes")
    lengths = {e[0].shape[0] for e in episodes}
    if len(lengths) != 1:
        raise ConfigError("training needs equal-length episodes")
    return np.stack([e[0] for e in episodes]), np.stack([e[1] for e in episodes])


def _save_png(frame: np.ndarray, path: Path):
    from PIL import Image

    img = np.clip(np.round((frame + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if img.shape[-1] == 1:
        img = img[..., 0]
    Image.fromarray(img).save(path)


def cmd_gen_data(args) -> int:
    spec = MazeSpec(grid=args.grid, resolution=args.resolution, view_radius=args.view_radius,
                    channels=args.channels)
    episodes = generate_dataset(spec, args.episodes, args.length, args.seed)
    write_dataset(episodes, args.out)
    log.info("wrote %d episodes to %s", len(episodes), args.out)
    return 0


TRAIN_FLAGS = {
    "mode": "mode", "rnn": "rnn", "clean_memory": "clean_memory", "action_into_rnn": "action_into_rnn",
    "steps": "steps", "seed": "seed", "lr": "lr", "batch_size": "batch_size", "data": "data", "out": "out",
}


def cmd_train(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    overrides = _overrides(args, TRAIN_FLAGS)
    model_cfg, train_cfg, run_cfg = resolve(text, overrides)
    if not run_cfg.data or not run_cfg.out:
        raise UsageError("train needs data and out (flags or config keys)")
    frames, actions = _load_data(run_cfg.data)
    shape = {"height": frames.shape[2], "width": frames.shape[3], "channels": frames.shape[4],
             "action_dim": actions.shape[2]}
    explicit = {**(flatcfg.parse_flat(text) if text else {}), **overrides}
    for key, value in shape.items():
        if key in explicit and int(explicit[key]) != value:
            raise ConfigError(f"config {key}={explicit[key]} does not match the dataset ({value})")
    model_cfg = dataclasses.replace(model_cfg, **shape)
    out = Path(run_cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(resolved_text(model_cfg, train_cfg, run_cfg))
    torch.manual_seed(int(rng(train_cfg.seed, "init").initial_seed()))
    model = RadModel(model_cfg)

    def progress(row):
        if row["step"] % max(1, args.log_every) == 0:
            log.info("step %d loss %.4f (%.2fs)", row["step"], row["loss"], row["seconds"])

    optimize(model, (frames, actions), train_cfg, out, resume=args.resume, progress=progress)
    return 0


def _rollout_episode(model, frames, actions, context, args, episode):
    ctx = torch.as_tensor(frames[None, :context])
    acts = torch.as_tensor(actions[None])
    video = rollout(model, ctx, acts, frames.shape[0] - context, steps=args.steps, sampler=args.sampler,
                    seed=args.seed * 1_000_003 + episode)
    return video[0].numpy()


def cmd_sample(args) -> int:
    model, meta, _ = load_model(args.checkpoint)
    model.eval()
    episodes = read_dataset(args.data)
    picked = range(len(episodes)) if args.episodes is None else range(min(args.episodes, len(episodes)))
    out = []
    for i in picked:
        frames, actions = episodes[i]
        context = args.context if args.context is not None else split_context(frames, args.context_fraction)[0].shape[0]
        if args.horizon is not None:
            frames = frames[:context + args.horizon]
            actions = actions[:context + args.horizon]
        video = _rollout_episode(model, frames, actions, context, args, i)
        out.append((video, actions))
        if args.dump_frames is not None:
            _dump(video, Path(args.dump_frames or str(Path(args.out).with_suffix("")) + "_frames"), i)
    write_dataset(out, args.out)
    return 0


def _dump(video, root: Path, episode: int):
    d = root / f"episode_{episode:04d}"
    d.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(video):
        _save_png(frame, d / f"frame_{t:04d}.png")


def cmd_eval(args) -> int:
    model, meta, _ = load_model(args.checkpoint)
    if args.mode is not None and args.mode != model.cfg.mode:
        raise ConfigError(f"checkpoint was trained {model.cfg.mode}, asked to evaluate {args.mode}")
    model.eval()
    episodes = read_dataset(args.data)
    if args.episodes is not None:
        episodes = episodes[:args.episodes]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports, videos = [], []
    if len({f.shape for f, _ in episodes}) == 1:
        groups = [(0, np.stack([f for f, _ in episodes]), np.stack([a for _, a in episodes]))]
    else:
        groups = [(i, f[None], a[None]) for i, (f, a) in enumerate(episodes)]
    for first, frames, actions in groups:
        r, v = evaluate_model(model, frames, actions, args.context_fraction, args.steps, args.sampler,
                              args.seed, args.batch, first_episode=first)
        reports += r
        videos += list(v)
    for r, video in zip(reports, videos):
        log.info("episode %d: psnr %.2f ssim %.4f", r.episode, r.psnr, r.ssim)
        if args.dump_frames is not None:
            _dump(video, Path(args.dump_frames) if args.dump_frames else out / "frames", r.episode)
    write_eval_csv(out / "eval.csv", reports)
    per_frame_curves(reports, out / "curves.csv")
    return 0


def cmd_bench(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    model_cfg, train_cfg, _ = resolve(text, _overrides(args, {}))
    lens = args.seq_lens or [32]
    rows = bench_resources(model_cfg, args.rnn, seq_len=lens[0], batch=args.batch, steps=args.steps,
                           warmup=args.warmup, seed=train_cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, BENCH_COLUMNS, rows)
    for r in rows:
        if "error" in r:
            log.warning("%s failed: %s", r["rnn"], r["error"])
    if len(lens) > 1:
        table = scaling_table(args.rnn, lens)
        write_csv(out.with_name(out.stem + "_scaling.csv"), SCALING_COLUMNS, table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rad", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a maze-world dataset")
    g.add_argument("--grid", type=int, default=11)
    g.add_argument("--episodes", type=int, default=2000)
    g.add_argument("--length", type=int, default=64)
    g.add_argument("--resolution", type=int, default=16)
    g.add_argument("--view-radius", type=int, default=1)
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--mode", choices=("chunkwise", "framewise"))
    t.add_argument("--rnn", choices=("none", "lstm", "ssm", "ttt"))
    t.add_argument("--clean-memory", type=_onoff)
    t.add_argument("--action-into-rnn", type=_onoff)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(fn=cmd_train)

    for name, fn, help_ in (("sample", cmd_sample, "roll out a checkpoint"),
                            ("eval", cmd_eval, "evaluate a checkpoint on held-out episodes")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--context-fraction", type=float, default=0.6)
        s.add_argument("--episodes", type=int)
        s.add_argument("--steps", type=int, default=20, help="sampler steps")
        s.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--dump-frames", nargs="?", const="", default=None)
        s.set_defaults(fn=fn)
        if name == "sample":
            s.add_argument("--context", type=int)
            s.add_argument("--horizon", type=int)
        else:
            s.add_argument("--mode", choices=("chunkwise", "framewise"))
            s.add_argument("--batch", type=int, default=32, help="episodes rolled out together")

    b = sub.add_parser("bench", help="time, memory and parameter benchmark per recurrent block")
    b.add_argument("--config")
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.add_argument("--rnn", type=_csv_list(str), default=["none", "lstm", "ssm", "ttt"])
    b.add_argument("--seq-lens", type=_csv_list(int))
    b.add_argument("--batch", type=int, default=2)
    b.add_argument("--steps", type=int, default=10)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    threads = os.environ.get("RAD_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.fn(args)
    except (UsageError, ConfigError, ConfigFileError) as exc:
        print(f"rad {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and fail with a runtime exit code
        print(f"rad {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
