"""Noise schedules, the reverse step and the three composition rules, by example.

Run: python3 demos/02_guidance_algebra.py
"""
# %%
import numpy as np
import torch

from sfvd.guidance import combine_fc, combine_motion, combine_scene
from sfvd.sampler import subdivision_order
from sfvd.schedule import build_schedule, reverse_variance

# %% Cosine and linear schedules; alpha_bar falls from ~1 to ~0.
for kind in ("cosine", "linear"):
    s = build_schedule(kind, 1000)
    print(f"{kind:6s} alpha_bar at t=1,250,500,750,1000:", np.round(s.alpha_bars[[0, 249, 499, 749, 999]], 4))

# %% The learned variance interpolates in log space between the posterior and prior variances.
s = build_schedule("cosine", 1000)
t = 400
for v in (0.0, 0.5, 1.0):
    var = reverse_variance(torch.tensor([v], dtype=torch.float64), t, s).item()
    print(f"v={v}: sigma^2={var:.3e}")
print(f"beta={s.betas[t - 1]:.3e}  beta_tilde={s.posterior_variance[t - 1]:.3e}")

# %% With a zero baseline and unit conditional prediction, each rule returns its effective weight.
u, c = torch.zeros(3), torch.ones(3)
print("scene, omega=0.7:", combine_scene(u, c, 0.7)[0].item())
print("motion, omega=-2.5:", combine_motion(u, c, -2.5)[0].item())
print("frame consistency, omega=-1.5:", combine_fc(u, c, c, -1.5)[0].item())
# identical branches pass through unchanged whatever the weight
print("equal inputs:", torch.equal(combine_fc(c, c, c, -1.5), c))

# %% Frames are generated first, last, then by repeated midpoint filling.
plan = subdivision_order(16)
for step in plan.steps[:5]:
    print(f"frame {step.target:2d} ({step.stage}) from", step.refs)
print("full order:", plan.order)
