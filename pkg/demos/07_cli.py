"""
Command line
============

Everything above is also reachable from the ``rad`` command: generate a
dataset, train, evaluate, sample and benchmark. This script drives it
through ``python -m rad`` with a deliberately tiny configuration.
"""

import subprocess
import sys
from pathlib import Path

work = Path("demo_run/cli")
work.mkdir(parents=True, exist_ok=True)
(work / "tiny.cfg").write_text("layers = 1\ndim = 48\nheads = 4\nwindow = 4\nloss_window = 4\n"
                               "batch_size = 2\ncheckpoint_every = 5\n")


def rad(*args):
    cmd = [sys.executable, "-m", "rad", *map(str, args)]
    print("$ rad", " ".join(map(str, args)), flush=True)
    subprocess.run(cmd, check=True)


rad("gen-data", "--grid", 9, "--episodes", 8, "--length", 20, "--resolution", 16, "--seed", 1,
    "--out", work / "maze.radv")
rad("train", "--config", work / "tiny.cfg", "--data", work / "maze.radv", "--out", work / "run", "--steps", 10)
rad("eval", "--checkpoint", work / "run/latest.radm", "--data", work / "maze.radv", "--out", work / "eval",
    "--episodes", 2, "--steps", 5)
rad("sample", "--checkpoint", work / "run/latest.radm", "--data", work / "maze.radv", "--out", work / "gen.radv",
    "--episodes", 1, "--context", 12, "--horizon", 8, "--steps", 5)
rad("bench", "--config", work / "tiny.cfg", "--rnn", "none,lstm,ssm,ttt", "--seq-lens", "16,32",
    "--steps", 2, "--out", work / "bench.csv")
print((work / "eval/eval.csv").read_text())
print((work / "bench.csv").read_text())
