"""
Recurrent memory blocks
=======================

Each transformer layer carries one recurrent block per spatial token. Three
kinds are available: an LSTM, a selective state-space model and a TTT layer
whose state is a linear model trained online. All of them scan in time linear
in the sequence length.
"""

import torch

from rad.memory import build_block, recurrent_scan
from rad.metrics import scaling_table

torch.manual_seed(0)
seq = torch.randn(4, 32, 24)  # [batch, time, features]

for kind in ("lstm", "ssm", "ttt"):
    block = build_block(kind, 24, 24, lstm_hidden=24)
    out, states = recurrent_scan(block, seq)
    # running the first half then resuming from its final state gives the same outputs
    first, st = recurrent_scan(block, seq[:, :16])
    last = [torch.as_tensor(f)[:, -1] for f in st]
    second, _ = recurrent_scan(block, seq[:, 16:], type(st)(*last))
    err = (torch.cat((first, second), 1) - out).abs().max().item()
    n = sum(p.numel() for p in block.parameters())
    print(f"{kind:4s} out {tuple(out.shape)} params {n:5d} split-scan error {err:.1e}")

# wall time of a scan at L and 2L; linear cost shows up as a ratio near 2
for row in scaling_table(lengths=(128, 256)):
    print(row)
