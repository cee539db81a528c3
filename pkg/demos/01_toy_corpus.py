"""A tour of the synthetic fluoroscopy-like corpus.

Run: python3 demos/01_toy_corpus.py [out_dir]
"""
# %%
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from sfvd.cli import contact_sheet
from sfvd.synth import SceneConfig, consecutive_mse, make_fvideo_set, make_pimage_set

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# %% Each video is a breathing background with static rib bands and one thin dark wire.
cfg = SceneConfig()
videos = make_fvideo_set(12, cfg, seed=7)
v = videos[0]
print(f"{len(videos)} videos of {v.frames.shape[0]} frames at {cfg.size}x{cfg.size}")
print("intensity range:", float(v.frames.min()), float(v.frames.max()))
print("wire pixels per frame:", v.masks.reshape(len(v), -1).sum(1))

# %% The wire is darker than its surroundings and moves faster than the diaphragm edge.
m = v.masks[0].astype(bool)
ring = ndimage.binary_dilation(m, iterations=5) & ~m
print(f"wire mean {v.frames[0][m].mean():+.3f} vs 5-px ring {v.frames[0][ring].mean():+.3f}")
print(f"wire speed {v.meta['wire_speed']:.2f} px/frame, edge speed {v.meta['edge_speed']:.2f} px/frame")

# %% Consecutive frames are close; frames from different videos are not.
near = np.mean([consecutive_mse(x.frames) for x in videos])
far = np.mean([np.mean((videos[i].frames[0] - videos[i + 1].frames[0]) ** 2) for i in range(11)])
print(f"consecutive-frame MSE {near:.4f}, cross-video MSE {far:.4f}")

# %% The partially annotated pool mirrors a 4000-of-14000 annotation ratio.
pool = make_pimage_set(20, 4000 / 14000, cfg, seed=3)
print(f"pool: {len(pool)} frames, {int(pool.annotated.sum())} annotated")

for i, x in enumerate(videos[:3]):
    contact_sheet(out / f"toy_{i}.png", x.frames, x.masks)
print("contact sheets written to", out)
