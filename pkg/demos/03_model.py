"""
The recurrent diffusion transformer
===================================

A frame is cut into patches, one token per patch. Each layer runs spatial
attention over the tokens of a frame, causal temporal attention inside a
short window, and a recurrent block that carries each token's history past
the window. The recurrent states at every frame boundary form a bank that
later windows can be seeded from.
"""

import torch

from rad.model import RadConfig, RadModel, count_params, param_formula, randomize_parameters
from rad.training import prefetch_hidden_states

cfg = RadConfig(layers=2, dim=32, heads=2, patch=4, height=8, width=8, window=4, loss_window=4, rnn="lstm")
torch.manual_seed(0)
# the output head starts at zero, so perturb every weight to get a model worth probing
model = randomize_parameters(RadModel(cfg).double(), seed=0)

print("parameters:", count_params(model))
print("closed form matches:", count_params(model) == param_formula(cfg))

B, L = 2, 12
frames = torch.rand(B, L, 8, 8, 3, dtype=torch.float64) * 2 - 1
actions = torch.nn.functional.one_hot(torch.randint(0, 5, (B, L)), 5).double()

# a window-1 chained pass over clean frames gives the state after every prefix
bank = prefetch_hidden_states(model, frames, actions)
print("bank entries:", len(bank), "(initial state plus one per frame)")

# states never look ahead: changing frame 7 leaves bank[0..7] untouched
frames2 = frames.clone()
frames2[:, 7] += 1
bank2 = prefetch_hidden_states(model, frames2, actions)
h, h2 = bank.layers[0].c, bank2.layers[0].c
print("bank[0..7] unchanged:", torch.equal(h[:, :8], h2[:, :8]), " bank[8] changed:", not torch.equal(h[:, 8], h2[:, 8]))

# a noisy window seeded from the bank predicts noise for its frames
t = torch.full((B, 4), 20)
eps, _ = model(frames[:, 4:8], t, actions[:, 4:8], window=4, states=bank.seeds([4]))
print("noise prediction:", tuple(eps.shape))
