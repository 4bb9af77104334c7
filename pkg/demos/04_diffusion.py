"""
Per-frame noise and DDIM sampling
=================================

Each frame in a sequence gets its own noise level, with level 0 meaning clean.
Training regresses the added noise on the noisy frames. Sampling walks a
deterministic DDIM sub-schedule from pure noise back to level 0.
"""

import torch

from rad.diffusion import build_schedule, ddim_step, ddim_timesteps, forward_diffuse, predict_x0

sched = build_schedule(50)
print("T =", sched.T, " alpha_bar at 1, 25, 50:", [round(float(sched.alpha_bars[t]), 4) for t in (1, 25, 50)])

gen = torch.Generator().manual_seed(0)
z0 = torch.rand(1, 4, 8, 8, 3, generator=gen) * 2 - 1
eps = torch.randn(z0.shape, generator=gen)
t = torch.tensor([[0, 10, 30, 50]])  # one level per frame
zt = forward_diffuse(z0, t, eps, sched)
print("level-0 frame passes through:", torch.equal(zt[0, 0], z0[0, 0]))
for lvl in (10, 30, 50):
    ab = float(sched.alpha_bars[lvl])
    print(f"level {lvl:2d}: signal-to-noise ratio {ab / (1 - ab):.3g}")

# with the true noise as the prediction, DDIM recovers the clean frame exactly
steps = ddim_timesteps(sched.T, 10)
print("sub-schedule:", steps)
z = forward_diffuse(z0[:, :1], torch.tensor([[sched.T]]), eps[:, :1], sched)
for a, b in zip(steps[:-1], steps[1:]):
    # the noise consistent with z and z0 at level a
    e = (z - sched.alpha_bars[a].sqrt() * z0[:, :1]) / (1 - sched.alpha_bars[a]).sqrt()
    z = ddim_step(z, a, b, e.float(), sched)
print("recovered:", torch.allclose(z, z0[:, :1], atol=1e-5))
print("x0 from level 30:", torch.allclose(predict_x0(zt[:, 2], 30, eps[:, 2], sched), z0[:, 2], atol=1e-5))
